use serde::{Deserialize, Serialize};

use crate::dsp::StftConfig;
use crate::error::{Error, Result};

/// Input representation fed to the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMode {
    /// Real and imaginary STFT parts as two channels.
    RealImag,
    /// One channel of log magnitude; phase is borrowed from the mixture.
    LogSpectrum,
}

impl FeatureMode {
    pub fn channels(self) -> usize {
        match self {
            FeatureMode::RealImag => 2,
            FeatureMode::LogSpectrum => 1,
        }
    }
}

impl std::str::FromStr for FeatureMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ri" | "real-imag" => Ok(FeatureMode::RealImag),
            "ls" | "log-spectrum" => Ok(FeatureMode::LogSpectrum),
            other => Err(Error::Config(format!("unknown feature mode `{other}` (expected ri or ls)"))),
        }
    }
}

/// Encoder output widths of the full-size network.
pub const FULL_WIDTHS: [usize; 7] = [64, 128, 256, 512, 512, 512, 512];

/// Layer plan of the Siamese U-Net. Channel pairs are `[in, out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub features: FeatureMode,
    pub encoder: Vec<[usize; 2]>,
    pub decoder: Vec<[usize; 2]>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub head_kernel: usize,
    pub share_encoder_weights: bool,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    /// Analysis settings the network was trained with.
    #[serde(default)]
    pub stft: StftConfig,
}

impl ModelConfig {
    /// Full-width network for the given features.
    pub fn full(features: FeatureMode) -> Self {
        Self::from_widths(features, &FULL_WIDTHS).expect("full plan is consistent")
    }

    /// Full plan with every hidden width divided by `divisor`.
    pub fn reduced(features: FeatureMode, divisor: usize) -> Result<Self> {
        if divisor == 0 || FULL_WIDTHS.iter().any(|w| w % divisor != 0) {
            return Err(Error::ModelConfig(format!("width divisor {divisor} must divide 64")));
        }
        let widths: Vec<usize> = FULL_WIDTHS.iter().map(|w| w / divisor).collect();
        Self::from_widths(features, &widths)
    }

    /// Builds the encoder and the mirrored decoder from encoder output widths.
    /// Decoder stage `j` consumes the previous stage output plus the
    /// mixture and reference encoder outputs of matching resolution.
    pub fn from_widths(features: FeatureMode, widths: &[usize]) -> Result<Self> {
        if widths.is_empty() || widths.contains(&0) {
            return Err(Error::ModelConfig("encoder widths must be non-empty and positive".into()));
        }
        let c = features.channels();
        let d = widths.len();
        let mut encoder = Vec::with_capacity(d);
        let mut prev = c;
        for &w in widths {
            encoder.push([prev, w]);
            prev = w;
        }
        let mut decoder: Vec<[usize; 2]> = Vec::with_capacity(d);
        for j in 0..d {
            let skip = 2 * widths[d - 1 - j];
            let cin = if j == 0 { skip } else { decoder[j - 1][1] + skip };
            let cout = if j + 1 == d { c } else { widths[d - 2 - j] };
            decoder.push([cin, cout]);
        }
        let cfg = Self {
            features,
            encoder,
            decoder,
            kernel: 4,
            stride: 2,
            padding: 1,
            head_kernel: 3,
            share_encoder_weights: false,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            stft: StftConfig::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn depth(&self) -> usize {
        self.encoder.len()
    }

    /// Feature-map sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ModelConfig(m));
        let c = self.features.channels();
        let d = self.depth();
        if d == 0 || self.decoder.len() != d {
            return bad(format!("encoder has {d} stages, decoder {}", self.decoder.len()));
        }
        if d > 16 {
            return bad(format!("depth {d} is unreasonably large"));
        }
        if self.stride != 2 || self.kernel != self.stride + 2 * self.padding {
            return bad(format!(
                "kernel {}, stride {}, padding {} do not halve the feature map",
                self.kernel, self.stride, self.padding
            ));
        }
        if self.head_kernel.is_multiple_of(2) {
            return bad("head kernel must be odd".into());
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0 && self.bn_eps > 0.0) {
            return bad("batch-norm momentum must lie in (0, 1] and eps be positive".into());
        }
        if self.encoder[0][0] != c {
            return bad(format!("first encoder stage takes {} channels, features have {c}", self.encoder[0][0]));
        }
        for i in 1..d {
            if self.encoder[i][0] != self.encoder[i - 1][1] {
                return bad(format!("encoder stage {i} input does not match stage {} output", i - 1));
            }
        }
        for j in 0..d {
            let skip = 2 * self.encoder[d - 1 - j][1];
            let expect = if j == 0 { skip } else { self.decoder[j - 1][1] + skip };
            if self.decoder[j][0] != expect {
                return bad(format!(
                    "decoder stage {j} takes {} channels, inputs provide {expect}",
                    self.decoder[j][0]
                ));
            }
            if self.decoder[j].contains(&0) || self.encoder[j].contains(&0) {
                return bad("channel counts must be positive".into());
            }
        }
        if self.decoder[d - 1][1] != c {
            return bad(format!("last decoder stage must output {c} channels"));
        }
        Ok(())
    }

    /// Trainable parameter count: `k*k*cin*cout + cout` per convolution and
    /// `2*cout` per batch norm.
    pub fn parameter_count(&self) -> usize {
        let k2 = self.kernel * self.kernel;
        let stage = |&[cin, cout]: &[usize; 2]| k2 * cin * cout + cout + 2 * cout;
        let enc: usize = self.encoder.iter().map(stage).sum();
        let dec: usize = self.decoder.iter().map(stage).sum();
        let c = self.features.channels();
        let head = self.head_kernel * self.head_kernel * c * c + c;
        let heads = if self.share_encoder_weights { 1 } else { 2 };
        heads * enc + dec + head
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_plan_matches_published_decoder() {
        let cfg = ModelConfig::full(FeatureMode::RealImag);
        assert_eq!(
            cfg.decoder,
            vec![[1024, 512], [1536, 512], [1536, 512], [1536, 256], [768, 128], [384, 64], [192, 2]]
        );
        assert_eq!(cfg.encoder[0], [2, 64]);
        assert_eq!(cfg.encoder[6], [512, 512]);
        assert_eq!(cfg.size_multiple(), 128);
        let ls = ModelConfig::full(FeatureMode::LogSpectrum);
        assert_eq!(ls.encoder[0], [1, 64]);
        assert_eq!(ls.decoder[6], [192, 1]);
    }

    #[test]
    fn inconsistent_plans_are_rejected() {
        let mut cfg = ModelConfig::full(FeatureMode::RealImag);
        cfg.decoder[3][0] = 1280;
        assert!(matches!(cfg.validate(), Err(Error::ModelConfig(_))));
        let mut cfg = ModelConfig::full(FeatureMode::RealImag);
        cfg.encoder[2] = [128, 300];
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::full(FeatureMode::RealImag);
        cfg.kernel = 3;
        assert!(cfg.validate().is_err());
        assert!(ModelConfig::reduced(FeatureMode::RealImag, 3).is_err());
        assert!(ModelConfig::from_widths(FeatureMode::RealImag, &[]).is_err());
    }

    #[test]
    fn reduced_plan_divides_widths() {
        let cfg = ModelConfig::reduced(FeatureMode::RealImag, 8).unwrap();
        assert_eq!(cfg.encoder[0], [2, 8]);
        assert_eq!(cfg.decoder[0], [128, 64]);
        assert_eq!(cfg.decoder[6], [24, 2]);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("ri".parse::<FeatureMode>().unwrap(), FeatureMode::RealImag);
        assert_eq!("ls".parse::<FeatureMode>().unwrap(), FeatureMode::LogSpectrum);
        assert!("mag".parse::<FeatureMode>().is_err());
    }
}
