use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::aligned_table;
use crate::error::{NeatError, Result};
use crate::imgproc::ImageTensor;
use crate::infer::{stylize_with, StyleRef, StylizeOptions};
use crate::nets::Model;

/// `(height, width)` pairs timed by default.
pub const DEFAULT_RESOLUTIONS: [(usize, usize); 3] = [(256, 256), (512, 512), (1080, 1920)];

#[derive(Clone, Debug, PartialEq)]
pub struct BenchOptions {
    pub warmup: usize,
    pub runs: usize,
    pub seed: u64,
    /// Labelled stylization settings, one report row each.
    pub variants: Vec<(String, StylizeOptions)>,
}

impl Default for BenchOptions {
    fn default() -> Self {
        let no_blur = {
            let mut o = StylizeOptions::default();
            o.prior.blur_enabled = false;
            o
        };
        BenchOptions {
            warmup: 2,
            runs: 10,
            seed: 0,
            variants: vec![
                ("stylize".into(), StylizeOptions::default()),
                ("stylize (no prior blur)".into(), no_blur),
            ],
        }
    }
}

/// Median wall time of `runs` calls after `warmup` untimed ones.
pub fn median_seconds(warmup: usize, runs: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    if runs == 0 {
        return Err(NeatError::invalid("at least one timed run is required"));
    }
    for _ in 0..warmup {
        f()?;
    }
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    let mid = runs / 2;
    Ok(if runs % 2 == 1 {
        times[mid]
    } else {
        0.5 * (times[mid - 1] + times[mid])
    })
}

/// Seconds per image by variant (rows) and resolution (columns); `None`
/// marks a resolution that failed, for example by running out of memory.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub resolutions: Vec<(usize, usize)>,
    pub rows: Vec<(String, Vec<Option<f64>>)>,
    pub runs: usize,
}

impl BenchReport {
    fn header(&self) -> Vec<String> {
        std::iter::once("Model".to_string())
            .chain(self.resolutions.iter().map(|(h, w)| format!("{w}x{h}")))
            .collect()
    }

    /// Aligned text table of seconds/image.
    pub fn to_table(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|(label, cells)| {
                std::iter::once(label.clone())
                    .chain(cells.iter().map(|c| match c {
                        Some(s) => format!("{s:.4}"),
                        None => "unavailable".into(),
                    }))
                    .collect()
            })
            .collect();
        format!(
            "Timing (seconds/image, median of {} runs)\n{}",
            self.runs,
            aligned_table(&self.header(), &rows)
        )
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.header().join(",");
        s.push('\n');
        for (label, cells) in &self.rows {
            s.push_str(label);
            for c in cells {
                s.push(',');
                if let Some(v) = c {
                    s.push_str(&v.to_string());
                }
            }
            s.push('\n');
        }
        s
    }
}

fn noise(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Result<ImageTensor> {
    ImageTensor::new(3, h, w, (0..3 * h * w).map(|_| rng.random()).collect())
}

/// Times end-to-end stylization, prior construction included, on seeded
/// random inputs at each resolution.
pub fn bench(model: &Model, resolutions: &[(usize, usize)], opts: &BenchOptions) -> BenchReport {
    let mut rows = Vec::with_capacity(opts.variants.len());
    for (label, variant) in &opts.variants {
        let mut cells = Vec::with_capacity(resolutions.len());
        for &(h, w) in resolutions {
            let attempt = catch_unwind(AssertUnwindSafe(|| -> Result<f64> {
                let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
                let content = noise(&mut rng, h, w)?;
                let style_img = noise(&mut rng, h, w)?;
                median_seconds(opts.warmup, opts.runs, || {
                    let style = StyleRef::new(model, &style_img)?;
                    stylize_with(model, &content, &style, variant).map(drop)
                })
            }));
            cells.push(match attempt {
                Ok(Ok(s)) => Some(s),
                Ok(Err(e)) => {
                    log::warn!("{label} at {w}x{h} unavailable: {e}");
                    None
                }
                Err(_) => {
                    log::warn!("{label} at {w}x{h} unavailable: panicked");
                    None
                }
            });
        }
        rows.push((label.clone(), cells));
    }
    BenchReport {
        resolutions: resolutions.to_vec(),
        rows,
        runs: opts.runs,
    }
}
