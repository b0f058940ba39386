//! Wall-clock forward-pass timing.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::{forward_with, ConvAlgo, Mode, Model};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor4};

pub const MIN_WARMUP: usize = 10;
pub const MIN_ITERS: usize = 30;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchResult {
    pub model: String,
    pub mode: Mode,
    pub algo: ConvAlgo,
    pub batch: usize,
    pub input_res: usize,
    pub warmup: usize,
    pub iters: usize,
    /// Seconds per timed iteration, in run order.
    pub times: Vec<f64>,
}

/// Linear-interpolated quantile of an ascending slice.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl BenchResult {
    fn sorted(&self) -> Vec<f64> {
        let mut t = self.times.clone();
        t.sort_by(f64::total_cmp);
        t
    }

    pub fn median_secs(&self) -> f64 {
        quantile(&self.sorted(), 0.5)
    }

    /// (first quartile, third quartile) of the per-iteration times.
    pub fn quartiles_secs(&self) -> (f64, f64) {
        let s = self.sorted();
        (quantile(&s, 0.25), quantile(&s, 0.75))
    }

    pub fn median_throughput(&self) -> f64 {
        self.batch as f64 / self.median_secs()
    }

    /// Interquartile range of examples/second.
    pub fn throughput_iqr(&self) -> f64 {
        let (q1, q3) = self.quartiles_secs();
        self.batch as f64 / q1 - self.batch as f64 / q3
    }
}

impl fmt::Display for BenchResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (q1, q3) = self.quartiles_secs();
        write!(
            f,
            "{} [{} mode, {:?}] batch {} @ {}x{}: median {:.3} ms (IQR {:.3}-{:.3} ms), \
             {:.1} examples/s (IQR {:.1}) over {} iters after {} warmup",
            self.model,
            self.mode,
            self.algo,
            self.batch,
            self.input_res,
            self.input_res,
            self.median_secs() * 1e3,
            q1 * 1e3,
            q3 * 1e3,
            self.median_throughput(),
            self.throughput_iqr(),
            self.iters,
            self.warmup
        )
    }
}

/// Times `iters` forward passes of a random batch after `warmup` untimed ones.
pub fn bench_forward<T: Scalar>(
    model: &Model<T>,
    batch: usize,
    input_res: usize,
    algo: ConvAlgo,
    warmup: usize,
    iters: usize,
) -> Result<BenchResult> {
    let mut r = bench_interleaved(&[model], batch, input_res, algo, warmup, iters)?;
    Ok(r.remove(0))
}

/// Like [`bench_forward`] for several models on the same input, alternating between them on
/// every iteration so slow drifts in machine load hit all of them alike.
pub fn bench_interleaved<T: Scalar>(
    models: &[&Model<T>],
    batch: usize,
    input_res: usize,
    algo: ConvAlgo,
    warmup: usize,
    iters: usize,
) -> Result<Vec<BenchResult>> {
    if warmup < MIN_WARMUP || iters < MIN_ITERS {
        return Err(Error::Bench(format!(
            "need at least {MIN_WARMUP} warmup and {MIN_ITERS} timed iterations, got {warmup} and {iters}"
        )));
    }
    if batch == 0 {
        return Err(Error::Bench("batch must be positive".into()));
    }
    let Some(first) = models.first() else {
        return Err(Error::Bench("nothing to benchmark".into()));
    };
    let c = first.spec().input_channels();
    if models.iter().any(|m| m.spec().input_channels() != c) {
        return Err(Error::Bench("models disagree on input channels".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let input = Tensor4::from_fn([batch, c, input_res, input_res], |_, _, _, _| T::of(rng.gen_range(-1.0..1.0)));
    for _ in 0..warmup {
        for m in models {
            std::hint::black_box(forward_with(m, &input, algo)?);
        }
    }
    let mut times = vec![Vec::with_capacity(iters); models.len()];
    for _ in 0..iters {
        for (m, t) in models.iter().zip(&mut times) {
            let start = Instant::now();
            std::hint::black_box(forward_with(m, &input, algo)?);
            t.push(start.elapsed().as_secs_f64());
        }
    }
    Ok(models
        .iter()
        .zip(times)
        .map(|(m, times)| BenchResult {
            model: m.spec().name().to_string(),
            mode: m.mode(),
            algo,
            batch,
            input_res,
            warmup,
            iters,
            times,
        })
        .collect())
}
