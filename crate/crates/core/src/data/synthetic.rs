//! Procedural stand-ins for a surgical-phase target domain and a generic
//! pretraining domain.
//!
//! Each class has its own mean intensity and spatial-frequency band. A frame
//! is `base + amplitude·sin(2π·f·(x cos θ + y sin θ)/W + φ) + vignette + noise`,
//! clipped to `[0, 1]`, with `f`, `θ` and `φ` drawn per frame. The target
//! domain carries a radial vignette (dark periphery) that the generic domain
//! lacks; together with disjoint frequency bands this gives the domain gap.

use serde::{Deserialize, Serialize};

use crate::augment::Frame;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Generic,
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_phases: usize,
    pub frames_per_phase: usize,
    /// `[height, width]`.
    pub image_size: [usize; 2],
    pub channels: usize,
    /// Per-class `[lo, hi]` band, in cycles per image width.
    pub texture_freq_range: Vec<[f64; 2]>,
    /// Per-class mean intensity, each in `[0.2, 0.8]`.
    pub base_intensity: Vec<f64>,
    pub texture_amplitude: f64,
    /// Signed strength of the radial vignette; negative darkens the border.
    pub vignette: f64,
    pub noise_sigma: f64,
    pub domain_tag: Domain,
}

impl SyntheticSpec {
    /// 4 phases × 300 frames, 32×32 grayscale, vignetted.
    pub fn target_default() -> Self {
        Self {
            num_phases: 4,
            frames_per_phase: 300,
            image_size: [32, 32],
            channels: 1,
            texture_freq_range: vec![[1.0, 1.6], [2.0, 2.6], [3.0, 3.6], [4.0, 4.6]],
            base_intensity: vec![0.35, 0.45, 0.55, 0.65],
            texture_amplitude: 0.15,
            vignette: -0.25,
            noise_sigma: 0.05,
            domain_tag: Domain::Target,
        }
    }

    /// 8 classes × 300 frames with higher, disjoint frequency bands and no vignette.
    pub fn generic_default() -> Self {
        Self {
            num_phases: 8,
            frames_per_phase: 300,
            image_size: [32, 32],
            channels: 1,
            texture_freq_range: (0..8)
                .map(|i| {
                    let lo = 5.5 + 0.9 * i as f64;
                    [lo, lo + 0.6]
                })
                .collect(),
            base_intensity: (0..8).map(|i| 0.2 + 0.6 * i as f64 / 7.0).collect(),
            texture_amplitude: 0.15,
            vignette: 0.0,
            noise_sigma: 0.05,
            domain_tag: Domain::Generic,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(format!("synthetic spec: {m}")));
        if self.num_phases == 0 || self.frames_per_phase == 0 || self.channels == 0 {
            return bad("counts must be positive".into());
        }
        if self.image_size[0] == 0 || self.image_size[1] == 0 {
            return bad("image size must be positive".into());
        }
        if self.texture_freq_range.len() != self.num_phases || self.base_intensity.len() != self.num_phases {
            return bad("need one frequency band and one intensity per phase".into());
        }
        if self.base_intensity.iter().any(|b| !(0.2..=0.8).contains(b)) {
            return bad("base intensities must lie in [0.2, 0.8]".into());
        }
        if self.noise_sigma < 0.0 {
            return bad("noise_sigma must be non-negative".into());
        }
        let mut bands = self.texture_freq_range.clone();
        if bands.iter().any(|[lo, hi]| !(lo <= hi) || *lo < 0.0) {
            return bad("frequency bands must satisfy 0 ≤ lo ≤ hi".into());
        }
        bands.sort_by(|a, b| a[0].total_cmp(&b[0]));
        if bands.windows(2).any(|w| w[0][1] >= w[1][0]) {
            return bad("frequency bands must be disjoint".into());
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.num_phases * self.frames_per_phase
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFrame {
    pub frame: Frame,
    pub phase: usize,
}

/// Frames ordered phase-major; frame `j` of phase `p` uses its own RNG stream.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec, seed: u64) -> Result<Vec<LabeledFrame>> {
    spec.validate()?;
    let [h, w] = spec.image_size;
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let rmax2 = cy * cy + cx * cx;
    let vignette: Vec<f64> = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64 - cy, (i % w) as f64 - cx);
            if rmax2 > 0.0 {
                spec.vignette * (y * y + x * x) / rmax2
            } else {
                0.0
            }
        })
        .collect();
    let domain = match spec.domain_tag {
        Domain::Generic => 0,
        Domain::Target => 1,
    };
    let mut out = Vec::with_capacity(spec.len());
    for phase in 0..spec.num_phases {
        let [flo, fhi] = spec.texture_freq_range[phase];
        let base = spec.base_intensity[phase];
        for j in 0..spec.frames_per_phase {
            let mut rng = Rng::stream(seed, &[domain, phase as u64, j as u64]);
            let mut data = Vec::with_capacity(spec.channels * h * w);
            for _ in 0..spec.channels {
                let freq = rng.range(flo, fhi);
                let theta = rng.range(0.0, std::f64::consts::PI);
                let offset = rng.range(0.0, std::f64::consts::TAU);
                let (ct, st) = (theta.cos(), theta.sin());
                for (i, vig) in vignette.iter().enumerate() {
                    let (y, x) = ((i / w) as f64, (i % w) as f64);
                    let arg = std::f64::consts::TAU * freq * (x * ct + y * st) / w as f64 + offset;
                    let v = base + spec.texture_amplitude * arg.sin() + vig + spec.noise_sigma * rng.normal();
                    data.push(v.clamp(0.0, 1.0));
                }
            }
            let frame = Frame::new(Tensor::new(vec![spec.channels, h, w], data)?)?;
            out.push(LabeledFrame { frame, phase });
        }
    }
    Ok(out)
}

/// Splits labelled frames into `(frames, labels)`.
pub fn unzip(frames: &[LabeledFrame]) -> (Vec<Frame>, Vec<usize>) {
    frames.iter().map(|f| (f.frame.clone(), f.phase)).unzip()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(domain: Domain) -> SyntheticSpec {
        let mut s = match domain {
            Domain::Target => SyntheticSpec::target_default(),
            Domain::Generic => SyntheticSpec::generic_default(),
        };
        s.frames_per_phase = 10;
        s.image_size = [16, 16];
        s
    }

    #[test]
    fn deterministic() {
        let a = generate_synthetic_dataset(&small(Domain::Target), 3).unwrap();
        let b = generate_synthetic_dataset(&small(Domain::Target), 3).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_dataset(&small(Domain::Target), 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn cardinality_and_balance() {
        let spec = small(Domain::Generic);
        let d = generate_synthetic_dataset(&spec, 1).unwrap();
        assert_eq!(d.len(), 80);
        for p in 0..8 {
            assert_eq!(d.iter().filter(|f| f.phase == p).count(), 10);
        }
        assert!(d.iter().all(|f| f.frame.pixels().data().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn default_bands_disjoint_across_domains() {
        let t = SyntheticSpec::target_default();
        let g = SyntheticSpec::generic_default();
        t.validate().unwrap();
        g.validate().unwrap();
        let tmax = t.texture_freq_range.iter().map(|b| b[1]).fold(0.0, f64::max);
        let gmin = g.texture_freq_range.iter().map(|b| b[0]).fold(f64::INFINITY, f64::min);
        assert!(tmax < gmin);
    }

    #[test]
    fn overlapping_bands_rejected() {
        let mut s = small(Domain::Target);
        s.texture_freq_range[1] = [1.5, 2.0];
        assert!(s.validate().is_err());
    }
}
