use proptest::prelude::*;
use wfen::bands;
use wfen::checkpoint::Checkpoint;
use wfen::ppm;
use wfen_core::Tensor;

fn ppm_file() -> impl Strategy<Value = Vec<u8>> {
    (1usize..12, 1usize..12).prop_flat_map(|(w, h)| {
        proptest::collection::vec(any::<u8>(), 3 * w * h)
            .prop_map(move |raster| ppm::encode_bytes(w, h, &raster).unwrap())
    })
}

fn tensor() -> impl Strategy<Value = Tensor<f32>> {
    proptest::collection::vec(1usize..4, 0..=4).prop_flat_map(|shape| {
        let n: usize = shape.iter().product();
        proptest::collection::vec(any::<u32>().prop_map(f32::from_bits), n)
            .prop_map(move |bits| Tensor::new(&shape, bits).unwrap())
    })
}

proptest! {
    #[test]
    fn ppm_round_trip_is_byte_identical(file in ppm_file()) {
        let img = ppm::decode(&file, "p").unwrap();
        prop_assert_eq!(ppm::encode(&img), file);
    }

    #[test]
    fn ppm_truncation_is_detected(file in ppm_file(), cut in 0.0f64..1.0) {
        let keep = ((file.len() as f64) * cut) as usize;
        prop_assert!(ppm::decode(&file[..keep.min(file.len() - 1)], "p").is_err());
    }

    #[test]
    fn dwt_idwt_files_are_byte_identical(file in ppm_file().prop_filter("even", |f| {
        let (w, h, _) = ppm::decode_bytes(f).unwrap();
        w % 2 == 0 && h % 2 == 0
    })) {
        let raw = bands::encode_raw(&bands::analyze(&file).unwrap());
        prop_assert_eq!(bands::synthesize(&bands::decode_raw(&raw).unwrap()).unwrap(), file);
    }

    #[test]
    fn checkpoint_round_trip_keeps_bits_and_order(
        config in "[ -~]{0,40}",
        tensors in proptest::collection::vec(tensor(), 0..5),
    ) {
        // NaN payloads compare unequal as floats, so compare bit patterns
        let ck = Checkpoint {
            config,
            entries: tensors.into_iter().enumerate().map(|(i, t)| (format!("t{i}"), t)).collect(),
        };
        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(&back.config, &ck.config);
        prop_assert_eq!(back.entries.len(), ck.entries.len());
        for ((na, a), (nb, b)) in back.entries.iter().zip(&ck.entries) {
            prop_assert_eq!(na, nb);
            prop_assert_eq!(a.shape(), b.shape());
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(a), bits(b));
        }
        prop_assert_eq!(back.encode(), bytes.clone());
        prop_assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
    }
}

#[test]
fn files_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let raster: Vec<u8> = (0..3 * 6 * 4).map(|i| (i * 7 % 256) as u8).collect();
    let src = dir.path().join("in.ppm");
    std::fs::write(&src, ppm::encode_bytes(6, 4, &raster).unwrap()).unwrap();
    let img = ppm::read(&src).unwrap();
    let dst = dir.path().join("out.ppm");
    ppm::write(&img, &dst).unwrap();
    assert_eq!(std::fs::read(&src).unwrap(), std::fs::read(&dst).unwrap());

    let err = ppm::read(dir.path().join("missing.ppm")).unwrap_err().to_string();
    assert!(err.contains("missing.ppm"), "{err}");
    let err = wfen::bands::cmd_idwt(&dir.path().join("nothing"), &dst).unwrap_err().to_string();
    assert!(err.contains("nothing.bands"), "{err}");
}
