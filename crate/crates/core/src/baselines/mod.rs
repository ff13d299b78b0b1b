//! The non-deep-learning methods: Otsu thresholding, the ground-truth
//! best-threshold oracle, multiscale Frangi vesselness, and a random-forest
//! voxel classifier over the standard feature stack.

mod forest;
mod frangi;
mod otsu;

pub use forest::{
    forest_predict, load_forest, save_forest, train_forest, ForestConfig, Node, TrainedForest,
    Tree,
};
pub use frangi::{frangi_vesselness, FrangiC, FrangiParams};
pub use otsu::{best_dice_threshold, otsu_threshold, threshold_candidates, Binarize};
