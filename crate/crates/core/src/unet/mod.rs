//! Declarative U-Net architectures: building, running, sizing and
//! serializing the compact student and the larger teacher.

mod gemm;
pub mod layers;
mod model;
mod tensor;
mod weights;

use sha2::{Digest, Sha256};

pub use model::{Tape, UNet};
pub use tensor::Tensor;
pub use weights::{decode_weights, encode_weights, load_weights, save_weights, ModelWeights, NamedTensor};

use crate::error::{Error, Result};

/// Normalization-layer behaviour for a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchitectureSpec {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Channel count of each encoder depth, shallowest first.
    pub encoder_widths: Vec<usize>,
    pub bottleneck_width: usize,
    /// 3×3 convolutions per block; the on-board student uses one.
    pub convs_per_block: usize,
    pub use_batchnorm: bool,
}

impl ArchitectureSpec {
    /// The compact on-board student: single-conv blocks, ~498k parameters.
    pub fn reference_student() -> Self {
        Self {
            in_channels: 4,
            num_classes: 2,
            encoder_widths: vec![16, 32, 64, 96],
            bottleneck_width: 96,
            convs_per_block: 1,
            use_batchnorm: true,
        }
    }

    /// A large double-conv teacher with ~15.6x the student's parameters.
    pub fn reference_teacher() -> Self {
        Self {
            in_channels: 4,
            num_classes: 2,
            encoder_widths: vec![32, 64, 128, 256],
            bottleneck_width: 512,
            convs_per_block: 2,
            use_batchnorm: true,
        }
    }

    pub fn depth(&self) -> usize {
        self.encoder_widths.len()
    }

    /// Spatial sizes must be divisible by this.
    pub fn alignment(&self) -> usize {
        1 << self.depth()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Architecture(m));
        if !(2..=5).contains(&self.depth()) {
            return bad(format!("depth {} outside [2, 5]", self.depth()));
        }
        if self.in_channels == 0 {
            return bad("in_channels must be positive".into());
        }
        if !(2..=255).contains(&self.num_classes) {
            return bad(format!("num_classes {} outside [2, 255]", self.num_classes));
        }
        if self.encoder_widths.contains(&0) || self.bottleneck_width == 0 {
            return bad("every width must be positive".into());
        }
        if !(1..=2).contains(&self.convs_per_block) {
            return bad(format!("convs_per_block {} must be 1 or 2", self.convs_per_block));
        }
        Ok(())
    }

    /// Canonical text form hashed into weight files.
    pub fn canonical(&self) -> String {
        let widths: Vec<String> = self.encoder_widths.iter().map(|w| w.to_string()).collect();
        format!(
            "unet;in={};classes={};widths={};bottleneck={};convs={};bn={}",
            self.in_channels,
            self.num_classes,
            widths.join(","),
            self.bottleneck_width,
            self.convs_per_block,
            u8::from(self.use_batchnorm)
        )
    }

    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.canonical().as_bytes()).into()
    }

    /// Number of stored tensors (parameters plus running statistics).
    pub fn tensor_count(&self) -> usize {
        let per_unit = 2 + if self.use_batchnorm { 4 } else { 0 };
        let units = (2 * self.depth() + 1) * self.convs_per_block;
        units * per_unit + 2 * self.depth() + 2
    }
}

/// Builds a network with the default initialization seed.
pub fn build_model(spec: &ArchitectureSpec) -> Result<UNet> {
    UNet::new(spec, 0)
}
