//! Generator and discriminator mixtures trained per partition with the
//! guide penalty.

pub mod model;
pub mod train;

pub use model::{
    combine_g_loss, d_loss, d_loss_graph, g_adversarial_graph, g_loss_guided_graph, DiscriminatorMixture,
    GanCheckpoint, GanShape, GeneratorMixture, LambdaSchedule, LossVariant, GAN_ACTIVATION,
};
pub use train::{
    read_samples_csv, route, sample_mixture, train_gan, write_samples_csv, GanConfig, GanTraining, MixtureSample,
    PartitionSampling,
};
