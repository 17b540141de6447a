//! Network building blocks: affine layers, layer norm, activations, dropout,
//! Adam, and a finite-difference gradient checker.

mod activation;
mod adam;
mod dropout;
mod gradcheck;
mod linear;
mod norm;

pub use activation::{
    leaky_relu, leaky_relu_derivative, relu, relu_derivative, sigmoid, softmax, softmax_backward,
    softplus, softplus_inverse, DEFAULT_LEAKY_SLOPE,
};
pub use adam::{AdamConfig, AdamState};
pub use dropout::{
    dropout_backward, dropout_forward, dropout_inference, validate_rate, DropoutMask,
};
pub use gradcheck::grad_check;
pub use linear::LinearParams;
pub use norm::{layer_norm, layer_norm_backward, normalize_vec, NormParams, NormTrace, DEFAULT_NORM_EPSILON};
