//! Small variational autoencoders on MNIST-style data, and the tools to check
//! whether their decoders behave like the optimal decoder: a posterior-weighted
//! average of the training images.

pub mod latent_map;
pub mod mnist;
pub mod nn;
pub mod oracle;
pub mod probe;
pub mod render;
pub mod seeds;
pub mod sweep;
pub mod vae;
