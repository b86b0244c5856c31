//! Minimal dense networks for offline RL: forward/backward passes, Adam,
//! Polyak averaging, finite-difference gradient verification, and a
//! checkpoint container format.

pub mod adam;
pub mod container;
pub mod gradcheck;
pub mod mlp;
pub mod scalar;

pub use adam::{AdamConfig, AdamState};
pub use container::{Container, ContainerError, Record, TensorData};
pub use mlp::{polyak_update, Activation, Backward, Dense, Gradients, Mlp, MlpSpec, Tape};
pub use scalar::Scalar;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),
    #[error("non-finite gradient in tensor `{0}`")]
    NonFiniteGradient(String),
    #[error("invalid network configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;

impl Mlp<f32> {
    /// Tensor records named `{prefix}.layers.{i}.weight|bias`.
    pub fn to_records(&self, prefix: &str) -> Vec<Record> {
        let mut out = Vec::new();
        for (i, l) in self.layers().iter().enumerate() {
            out.push(Record::f32(
                format!("{prefix}.layers.{i}.weight"),
                vec![l.out_dim, l.in_dim],
                l.weight.clone(),
            ));
            out.push(Record::f32(
                format!("{prefix}.layers.{i}.bias"),
                vec![l.out_dim],
                l.bias.clone(),
            ));
        }
        out
    }

    /// Rebuild a network of architecture `spec` from records written by `to_records`.
    pub fn from_records(prefix: &str, spec: &MlpSpec, container: &Container) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.layer_sizes.len() - 1);
        for (i, w) in spec.layer_sizes.windows(2).enumerate() {
            let (in_dim, out_dim) = (w[0], w[1]);
            let wr = container.get(&format!("{prefix}.layers.{i}.weight"))?;
            let br = container.get(&format!("{prefix}.layers.{i}.bias"))?;
            if wr.shape != [out_dim, in_dim] || br.shape != [out_dim] {
                return Err(NnError::ArchitectureMismatch(format!(
                    "{prefix} layer {i}: stored shapes {:?}/{:?} differ from manifest",
                    wr.shape, br.shape
                )));
            }
            layers.push(Dense {
                in_dim,
                out_dim,
                weight: wr.as_f32()?.to_vec(),
                bias: br.as_f32()?.to_vec(),
            });
        }
        Mlp::from_layers(layers, spec.output_activation)
    }
}
