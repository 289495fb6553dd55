//! Shipped network definitions.
//!
//! `LENET` reads its data through `blob_data` layers named `mnist_train` and
//! `mnist_test`. `VGG16` and `RESNET152` are sized for 32x32x3 input with 10
//! classes and take `data` and `label` as external feeds.

pub const LENET: &str = include_str!("../../fixtures/lenet.json");
pub const VGG16: &str = include_str!("../../fixtures/vgg16.json");
pub const RESNET152: &str = include_str!("../../fixtures/resnet152.json");
