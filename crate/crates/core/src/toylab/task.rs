use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_divisible, invalid, Result};
use crate::head::Target;
use crate::tensor::{Dims, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Keypoints,
    Segmentation,
}

impl std::str::FromStr for TaskKind {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "keypoints" => Ok(TaskKind::Keypoints),
            "segmentation" => Ok(TaskKind::Segmentation),
            other => Err(crate::Error::Config(format!("unknown task kind {other:?}"))),
        }
    }
}

/// Blob and shape colors, cycled when there are more keypoints/classes.
const PALETTE: [[f64; 3]; 8] = [
    [1.0, 0.1, 0.1],
    [0.1, 1.0, 0.1],
    [0.1, 0.1, 1.0],
    [1.0, 1.0, 0.1],
    [1.0, 0.1, 1.0],
    [0.1, 1.0, 1.0],
    [1.0, 0.6, 0.2],
    [0.6, 0.2, 1.0],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub image_size: usize,
    /// Keypoints K, or classes C including background.
    pub count: usize,
    /// Heatmap Gaussian σ in heatmap pixels; 0 renders one-hot peaks.
    /// Defaults to a sixteenth of the heatmap side.
    #[serde(default)]
    pub sigma: Option<f64>,
    /// Image-to-heatmap stride (`s1`).
    #[serde(default = "default_stride")]
    pub stride: usize,
    /// Amplitude of the uniform background noise.
    #[serde(default = "default_noise")]
    pub noise: f64,
    pub seed: u64,
}

fn default_stride() -> usize {
    4
}
fn default_noise() -> f64 {
    0.2
}

impl SyntheticTask {
    pub fn keypoints(image_size: usize, k: usize, seed: u64) -> Self {
        Self {
            kind: TaskKind::Keypoints,
            image_size,
            count: k,
            sigma: None,
            stride: default_stride(),
            noise: default_noise(),
            seed,
        }
    }

    pub fn segmentation(image_size: usize, classes: usize, seed: u64) -> Self {
        Self {
            kind: TaskKind::Segmentation,
            count: classes,
            ..Self::keypoints(image_size, classes, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return invalid("gen_task", "keypoint/class count must be positive");
        }
        if self.kind == TaskKind::Segmentation && self.count < 2 {
            return invalid("gen_task", "segmentation needs background plus at least one class");
        }
        if let Some(s) = self.sigma {
            if !(s >= 0.0 && s.is_finite()) {
                return invalid("gen_task", format!("sigma {s} must be finite and non-negative"));
            }
        }
        if self.stride == 0 {
            return invalid("gen_task", "stride must be positive");
        }
        ensure_divisible("gen_task image size", self.image_size, self.stride)
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.stride
    }

    pub fn sigma(&self) -> f64 {
        self.sigma.unwrap_or(self.grid_side() as f64 / 16.0)
    }

    /// Synthetic head segment length in image pixels.
    pub fn head_len(&self) -> f64 {
        self.image_size as f64 / 10.0
    }

    /// Output channels a model needs for this task.
    pub fn channels(&self) -> usize {
        self.count
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T: Scalar> {
    /// `(n, 3, H, W)`
    pub images: Tensor<T>,
    /// Keypoints: `(n, K, H/s1, W/s1)` heatmaps. Segmentation: `(n, 1, H, W)` labels.
    pub target: Target<T>,
    /// Keypoint centers in image pixels, `(row, col)`, `n × K`.
    pub keypoints: Vec<Vec<(f64, f64)>>,
    pub stride: usize,
}

impl<T: Scalar> Batch<T> {
    /// Target at prediction-grid resolution.
    pub fn grid_target(&self) -> Result<Target<T>> {
        match &self.target {
            Target::Continuous(_) => Ok(self.target.clone()),
            Target::Discrete(_) => self.target.downsample(self.stride),
        }
    }
}

/// Heatmap pixel to image pixel, centers aligned.
pub fn grid_to_image(v: f64, stride: usize) -> f64 {
    (v + 0.5) * stride as f64 - 0.5
}

/// Renders a peak-1 Gaussian (or a one-hot peak for `sigma == 0`) centered on `(cy, cx)`.
pub fn render_heatmap(side: usize, cy: f64, cx: f64, sigma: f64) -> Vec<f64> {
    let mut out = vec![0.0; side * side];
    if sigma == 0.0 {
        let (y, x) = (cy.round(), cx.round());
        if y >= 0.0 && x >= 0.0 && (y as usize) < side && (x as usize) < side {
            out[y as usize * side + x as usize] = 1.0;
        }
        return out;
    }
    let d = 2.0 * sigma * sigma;
    for y in 0..side {
        for x in 0..side {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            out[y * side + x] = (-(dy * dy + dx * dx) / d).exp();
        }
    }
    out
}

/// Batch number `index` of the task's stream; a pure function of
/// `(task, batch, index)`.
pub fn gen_task<T: Scalar>(task: &SyntheticTask, batch: usize, index: u64) -> Result<Batch<T>> {
    task.validate()?;
    if batch == 0 {
        return invalid("gen_task", "batch size must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(task.seed);
    rng.set_stream(index);
    let side = task.image_size;
    let plane = side * side;
    let mut images = vec![0.0f64; batch * 3 * plane];
    for v in images.iter_mut() {
        *v = rng.gen::<f64>() * task.noise;
    }
    match task.kind {
        TaskKind::Keypoints => {
            let grid = task.grid_side();
            let k = task.count;
            let mut heat = vec![0.0f64; batch * k * grid * grid];
            let mut keypoints = Vec::with_capacity(batch);
            let blob_sigma = task.stride as f64 * 0.5;
            let margin = 1.min(grid / 4);
            for n in 0..batch {
                let mut pts = Vec::with_capacity(k);
                for j in 0..k {
                    let gy = rng.gen_range(margin..grid - margin) as f64;
                    let gx = rng.gen_range(margin..grid - margin) as f64;
                    let (iy, ix) = (grid_to_image(gy, task.stride), grid_to_image(gx, task.stride));
                    let color = PALETTE[j % PALETTE.len()];
                    let img = &mut images[n * 3 * plane..(n + 1) * 3 * plane];
                    splat(img, side, iy, ix, blob_sigma, color);
                    let h = render_heatmap(grid, gy, gx, task.sigma());
                    heat[(n * k + j) * grid * grid..(n * k + j + 1) * grid * grid].copy_from_slice(&h);
                    pts.push((iy, ix));
                }
                keypoints.push(pts);
            }
            Ok(Batch {
                images: to_tensor(Dims::new(batch, 3, side, side), images)?,
                target: Target::Continuous(to_tensor(Dims::new(batch, k, grid, grid), heat)?),
                keypoints,
                stride: task.stride,
            })
        }
        TaskKind::Segmentation => {
            let mut labels = vec![0u32; batch * plane];
            for n in 0..batch {
                let img = &mut images[n * 3 * plane..(n + 1) * 3 * plane];
                let lab = &mut labels[n * plane..(n + 1) * plane];
                for class in 1..task.count {
                    let color = PALETTE[(class - 1) % PALETTE.len()];
                    let disk = rng.gen_bool(0.5);
                    let r = rng.gen_range(side as f64 / 10.0..side as f64 / 4.0);
                    let cy = rng.gen_range(0.0..side as f64);
                    let cx = rng.gen_range(0.0..side as f64);
                    for y in 0..side {
                        for x in 0..side {
                            let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                            let inside = if disk {
                                dy * dy + dx * dx <= r * r
                            } else {
                                dy.abs() <= r && dx.abs() <= r * 0.7
                            };
                            if inside {
                                lab[y * side + x] = class as u32;
                                for (c, &v) in color.iter().enumerate() {
                                    img[c * plane + y * side + x] = v;
                                }
                            }
                        }
                    }
                }
            }
            Ok(Batch {
                images: to_tensor(Dims::new(batch, 3, side, side), images)?,
                target: Target::Discrete(Tensor::from_vec((batch, 1, side, side), labels)?),
                keypoints: Vec::new(),
                stride: task.stride,
            })
        }
    }
}

fn splat(img: &mut [f64], side: usize, cy: f64, cx: f64, sigma: f64, color: [f64; 3]) {
    let plane = side * side;
    let d = 2.0 * sigma * sigma;
    for y in 0..side {
        for x in 0..side {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let a = (-(dy * dy + dx * dx) / d).exp();
            if a < 1e-4 {
                continue;
            }
            for (c, &v) in color.iter().enumerate() {
                let p = &mut img[c * plane + y * side + x];
                *p = p.max(a * v);
            }
        }
    }
}

fn to_tensor<T: Scalar>(dims: Dims, data: Vec<f64>) -> Result<Tensor<T>> {
    Tensor::from_vec(dims, data.into_iter().map(T::from_f64_lossy).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigma_zero_is_one_hot() {
        let mut t = SyntheticTask::keypoints(32, 2, 5);
        t.sigma = Some(0.0);
        let b = gen_task::<f64>(&t, 2, 0).unwrap();
        let Target::Continuous(h) = &b.target else { panic!() };
        for p in h.data().chunks(64) {
            assert_eq!(p.iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(p.iter().filter(|&&v| v == 0.0).count(), 63);
        }
    }

    #[test]
    fn same_seed_same_batch() {
        for t in [SyntheticTask::keypoints(32, 3, 9), SyntheticTask::segmentation(32, 4, 9)] {
            let a = gen_task::<f32>(&t, 3, 7).unwrap();
            let b = gen_task::<f32>(&t, 3, 7).unwrap();
            assert_eq!(a, b);
            assert_ne!(a, gen_task::<f32>(&t, 3, 8).unwrap());
        }
    }

    #[test]
    fn zero_count_rejected() {
        assert!(gen_task::<f64>(&SyntheticTask::keypoints(32, 0, 0), 1, 0).is_err());
        assert!(gen_task::<f64>(&SyntheticTask::segmentation(32, 1, 0), 1, 0).is_err());
    }

    #[test]
    fn segmentation_labels_in_range() {
        let t = SyntheticTask::segmentation(32, 3, 1);
        let b = gen_task::<f64>(&t, 4, 0).unwrap();
        let Target::Discrete(l) = &b.target else { panic!() };
        assert!(l.data().iter().all(|&v| v < 3));
        assert!(l.data().iter().any(|&v| v > 0));
        assert_eq!(b.grid_target().unwrap().dims(), Dims::new(4, 1, 8, 8));
    }
}
