use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Output distribution over pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Likelihood {
    /// Canvas holds one logit per pixel.
    Bernoulli,
    /// Canvas holds `[means | log-variances]` blocks; the input is
    /// dequantized with uniform noise of width `s`.
    DequantizedGaussian,
}

impl Likelihood {
    pub fn as_str(&self) -> &'static str {
        match self {
            Likelihood::Bernoulli => "bernoulli",
            Likelihood::DequantizedGaussian => "dequantized_gaussian",
        }
    }
}

impl FromStr for Likelihood {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bernoulli" => Ok(Likelihood::Bernoulli),
            "dequantized_gaussian" | "gaussian" => Ok(Likelihood::DequantizedGaussian),
            other => Err(Error::Config(format!("unknown likelihood `{other}`"))),
        }
    }
}

/// Architecture of a convolutional DRAW model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub timesteps: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// LSTM feature maps per layer.
    pub feature_maps: Vec<usize>,
    /// Latent maps per layer.
    pub latent_maps: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub beta: f64,
    pub likelihood: Likelihood,
    /// Score the Gaussian likelihood as the probability mass of each pixel's
    /// quantization bin instead of as a density ratio.
    pub binned_gaussian: bool,
    /// Posterior standard deviation is a learned per-channel constant.
    pub fixed_posterior_variance: bool,
    /// Input quantization step.
    pub quant_step: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 1,
            timesteps: 32,
            channels: 3,
            height: 32,
            width: 32,
            feature_maps: vec![160],
            latent_maps: vec![12],
            kernel: 5,
            stride: 2,
            beta: 1.0,
            likelihood: Likelihood::DequantizedGaussian,
            binned_gaussian: false,
            fixed_posterior_variance: false,
            quant_step: 1.0 / 256.0,
        }
    }
}

const KEYS: &[&str] = &[
    "layers",
    "timesteps",
    "channels",
    "height",
    "width",
    "lstm_feature_maps",
    "latent_maps",
    "kernel",
    "stride",
    "beta",
    "likelihood",
    "binned_gaussian",
    "fixed_posterior_variance",
    "quant_step",
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|p| parse(key, p.trim())).collect()
}

fn join(v: &[usize]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl ModelConfig {
    /// Spatial size of the recurrent state maps.
    pub fn hidden_dims(&self) -> (usize, usize) {
        (self.height / self.stride, self.width / self.stride)
    }

    /// Channels of the canvas `r`.
    pub fn canvas_channels(&self) -> usize {
        match self.likelihood {
            Likelihood::Bernoulli => self.channels,
            Likelihood::DequantizedGaussian => 2 * self.channels,
        }
    }

    /// Input dimensions `C * H * W`.
    pub fn input_dims(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(1..=2).contains(&self.layers) {
            return bad(format!("layers must be 1 or 2, got {}", self.layers));
        }
        if self.timesteps == 0 {
            return bad("timesteps must be >= 1".into());
        }
        if self.feature_maps.len() != self.layers || self.latent_maps.len() != self.layers {
            return bad(format!(
                "need one lstm_feature_maps and latent_maps entry per layer ({} layers)",
                self.layers
            ));
        }
        if self.feature_maps.contains(&0) {
            return bad("lstm_feature_maps must be positive".into());
        }
        if self.latent_maps[0] == 0 {
            return bad("the first layer needs at least one latent map".into());
        }
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return bad("image dims must be positive".into());
        }
        if self.kernel.is_multiple_of(2) || self.stride == 0 {
            return bad(format!(
                "kernel must be odd and stride positive ({} / {})",
                self.kernel, self.stride
            ));
        }
        if !self.height.is_multiple_of(self.stride) || !self.width.is_multiple_of(self.stride) {
            return bad(format!(
                "{}x{} input is not divisible by stride {}",
                self.height, self.width, self.stride
            ));
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return bad(format!("beta must be positive, got {}", self.beta));
        }
        if !(self.quant_step >= 0.0) {
            return bad("quant_step must be non-negative".into());
        }
        if self.binned_gaussian && self.likelihood != Likelihood::DequantizedGaussian {
            return bad("binned_gaussian requires the gaussian likelihood".into());
        }
        Ok(())
    }

    /// Sets one `key = value` pair.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "layers" => self.layers = parse(key, v)?,
            "timesteps" | "T" | "n_t" => self.timesteps = parse(key, v)?,
            "channels" => self.channels = parse(key, v)?,
            "height" => self.height = parse(key, v)?,
            "width" => self.width = parse(key, v)?,
            "lstm_feature_maps" => self.feature_maps = parse_list(key, v)?,
            "latent_maps" => self.latent_maps = parse_list(key, v)?,
            "kernel" => self.kernel = parse(key, v)?,
            "stride" => self.stride = parse(key, v)?,
            "beta" => self.beta = parse(key, v)?,
            "likelihood" => self.likelihood = v.parse()?,
            "binned_gaussian" => self.binned_gaussian = parse(key, v)?,
            "fixed_posterior_variance" => self.fixed_posterior_variance = parse(key, v)?,
            "quant_step" => self.quant_step = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown model key `{other}`"))),
        }
        Ok(())
    }

    pub fn is_key(key: &str) -> bool {
        KEYS.contains(&key) || matches!(key, "T" | "n_t")
    }

    /// Canonical `key = value` text; parsing it back yields an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "layers = {}", self.layers);
        let _ = writeln!(s, "timesteps = {}", self.timesteps);
        let _ = writeln!(s, "channels = {}", self.channels);
        let _ = writeln!(s, "height = {}", self.height);
        let _ = writeln!(s, "width = {}", self.width);
        let _ = writeln!(s, "lstm_feature_maps = {}", join(&self.feature_maps));
        let _ = writeln!(s, "latent_maps = {}", join(&self.latent_maps));
        let _ = writeln!(s, "kernel = {}", self.kernel);
        let _ = writeln!(s, "stride = {}", self.stride);
        let _ = writeln!(s, "beta = {:?}", self.beta);
        let _ = writeln!(s, "likelihood = {}", self.likelihood.as_str());
        let _ = writeln!(s, "binned_gaussian = {}", self.binned_gaussian);
        let _ = writeln!(
            s,
            "fixed_posterior_variance = {}",
            self.fixed_posterior_variance
        );
        let _ = writeln!(s, "quant_step = {:?}", self.quant_step);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (key, value) in parse_kv(text)? {
            cfg.set(&key, &value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Splits `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "line {}: expected `key = value`, got `{line}`",
                n + 1
            ))
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let cfg = ModelConfig {
            layers: 2,
            feature_maps: vec![32, 16],
            latent_maps: vec![4, 2],
            beta: 0.4,
            fixed_posterior_variance: true,
            ..ModelConfig::default()
        };
        let back = ModelConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_and_bad_shapes_are_rejected() {
        assert!(ModelConfig::from_text("colour = red").is_err());
        assert!(ModelConfig::from_text("height = 31").is_err());
        assert!(ModelConfig::from_text("timesteps = 0").is_err());
        assert!(ModelConfig::from_text("layers = 2").is_err());
        assert!(ModelConfig::from_text("beta = 0").is_err());
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = ModelConfig::from_text("# toy\n\ntimesteps = 8 # short\nkernel=3\n").unwrap();
        assert_eq!(cfg.timesteps, 8);
        assert_eq!(cfg.kernel, 3);
    }

    #[test]
    fn hidden_maps_are_stride_reduced() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.hidden_dims(), (16, 16));
        assert_eq!(cfg.canvas_channels(), 6);
    }
}
