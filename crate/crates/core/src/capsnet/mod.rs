//! Float reference of the capsule-network beamformer.

mod config;
mod infer;
mod ops;

pub use config::{
    count_flops, count_params, layer_ops_per_pixel, layer_params as layer_param_count, routing_ops_per_pixel,
    squash_ops, CapsConfig, CapsConvSpec, ConvSpec, FcSpec, Layer, LayerKind, RoutingSpec,
};
pub use infer::{
    activation_name, bias_name, forward_observed, infer, param_dims, random_bundle, weight_name, INPUT_ACTIVATION,
};
pub use ops::{
    broadcast_predictions, caps_conv_layer, conv2d, dynamic_routing, route, routing_softmax, squash, weight_index,
    RoutingState,
};
