//! Direct-from-definition PSNR and SSIM used as test oracles.

use wfen_core::ImageBuffer;

pub fn naive_psnr(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    let mut se = 0.0;
    for c in 0..3 {
        for y in 0..a.height {
            for x in 0..a.width {
                let d = a.get(c, y, x) as f64 - b.get(c, y, x) as f64;
                se += d * d;
            }
        }
    }
    let mse = se / (3 * a.width * a.height) as f64;
    10.0 * (1.0 / mse).log10()
}

/// Windowed statistics straight from the definition, with a 2-D Gaussian built in one piece.
pub fn naive_ssim(a: &ImageBuffer, b: &ImageBuffer, win: usize, sigma: f64) -> f64 {
    let r = (win - 1) as f64 / 2.0;
    let mut kernel = vec![vec![0.0; win]; win];
    let mut total = 0.0;
    for (i, row) in kernel.iter_mut().enumerate() {
        for (j, k) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - r, j as f64 - r);
            *k = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            total += *k;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut acc = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        for y0 in 0..=a.height - win {
            for x0 in 0..=a.width - win {
                let (mut ma, mut mb) = (0.0, 0.0);
                for i in 0..win {
                    for j in 0..win {
                        let k = kernel[i][j] / total;
                        ma += k * a.get(c, y0 + i, x0 + j) as f64;
                        mb += k * b.get(c, y0 + i, x0 + j) as f64;
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..win {
                    for j in 0..win {
                        let k = kernel[i][j] / total;
                        let da = a.get(c, y0 + i, x0 + j) as f64 - ma;
                        let db = b.get(c, y0 + i, x0 + j) as f64 - mb;
                        va += k * da * da;
                        vb += k * db * db;
                        cov += k * da * db;
                    }
                }
                acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    acc / count as f64
}
