use std::fmt;
use std::time::Duration;

/// Wall-time samples of one pipeline stage.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageTimes {
    samples: Vec<Duration>,
}

impl StageTimes {
    pub fn push(&mut self, d: Duration) {
        self.samples.push(d);
    }

    pub fn samples(&self) -> &[Duration] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Mean and population standard deviation in milliseconds.
    pub fn mean_std_ms(&self) -> (f64, f64) {
        if self.samples.is_empty() {
            return (0.0, 0.0);
        }
        let n = self.samples.len() as f64;
        let ms: Vec<f64> = self.samples.iter().map(|d| d.as_secs_f64() * 1e3).collect();
        let mean = ms.iter().sum::<f64>() / n;
        let var = ms.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    }
}

/// Summary of a run: counts and per-stage timings.
///
/// Displays as `key = value` lines, one stage per timing row.
#[derive(Clone, Debug, Default)]
pub struct RunReport {
    pub scans: usize,
    pub frames: usize,
    pub degraded_frames: usize,
    pub keyframes: usize,
    pub submaps: usize,
    pub submap_factors: usize,
    pub global_optimizations: usize,
    pub global_failures: usize,
    /// Iterations of the latest successful global optimization.
    pub global_iterations: Option<usize>,
    /// Smallest reduced eigenvalue of the latest global optimization, when
    /// the degeneracy check is enabled.
    pub global_min_eigenvalue: Option<f64>,
    pub use_imu: bool,
    pub preprocess: StageTimes,
    pub odometry: StageTimes,
    pub local_mapping: StageTimes,
    pub global_mapping: StageTimes,
    pub wall: Duration,
    pub error: Option<String>,
}

impl RunReport {
    pub fn stages(&self) -> [(&'static str, &StageTimes); 4] {
        [
            ("preprocessing", &self.preprocess),
            ("odometry_estimation", &self.odometry),
            ("local_mapping", &self.local_mapping),
            ("global_mapping", &self.global_mapping),
        ]
    }
}

impl fmt::Display for RunReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "scans = {}", self.scans)?;
        writeln!(f, "frames = {}", self.frames)?;
        writeln!(f, "degraded_frames = {}", self.degraded_frames)?;
        writeln!(f, "keyframes = {}", self.keyframes)?;
        writeln!(f, "submaps = {}", self.submaps)?;
        writeln!(f, "submap_factors = {}", self.submap_factors)?;
        writeln!(f, "global_optimizations = {}", self.global_optimizations)?;
        writeln!(f, "global_failures = {}", self.global_failures)?;
        if let Some(it) = self.global_iterations {
            writeln!(f, "global_iterations = {it}")?;
        }
        if let Some(ev) = self.global_min_eigenvalue {
            writeln!(f, "global_min_eigenvalue = {ev:.6e}")?;
        }
        writeln!(f, "use_imu = {}", self.use_imu)?;
        for (name, times) in self.stages() {
            let (mean, std) = times.mean_std_ms();
            writeln!(f, "{name}_count = {}", times.len())?;
            writeln!(f, "{name}_mean_ms = {mean:.3}")?;
            writeln!(f, "{name}_std_ms = {std:.3}")?;
        }
        writeln!(f, "wall_s = {:.3}", self.wall.as_secs_f64())?;
        match &self.error {
            Some(e) => writeln!(f, "error = {e:?}"),
            None => writeln!(f, "error = \"\""),
        }
    }
}
