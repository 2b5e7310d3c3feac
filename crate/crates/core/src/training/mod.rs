//! Losses, hand-derived gradients, and the per-task adaption loop.

mod adapt;
mod config;
mod gradcheck;
mod head;
mod losses;
mod supervised;

pub use adapt::{adapt_task, backward, mean_intra_class_distance, AdaptOutcome, AdapterBlockGrad, Gradients};
pub use config::{cosine_annealed_lr, TrainConfig};
pub use gradcheck::{check_gradients, GradCheckReport, GradProblem, ParamCheck, GRAD_EPS, GRAD_TOL};
pub use head::TemporaryHead;
pub use losses::{center_adapt_loss, center_loss, cross_entropy, update_centers, ClassCenters};
pub use supervised::fit_classifier;
