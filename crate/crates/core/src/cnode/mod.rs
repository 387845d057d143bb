//! Characteristic fields, the three-stage model `g → characteristics → Φ`, and training.

mod constructions;
mod field;
mod model;
mod train;

pub use constructions::{homeomorphism, intersecting};
pub use field::{BalanceMode, CharacteristicField, Direction, DirectionInputs};
pub use model::{integrate_node, CnodeModel, Evolution, FieldDynamics};
pub use train::{
    evaluate, sample_gradient, train, EpochRecord, GradMode, Loss, Sample, SampleGradient,
    TrainConfig,
};
