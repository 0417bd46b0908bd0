//! Classical reference models over the feature vectors: ordinary least
//! squares, the multivariate power model, and a random forest tuned by
//! out-of-bag error.

mod forest;
mod linear;
mod power;

pub use forest::{
    fit_random_forest, grid_search_oob, oob_error, ForestHyperParams, GridSearchResult,
    GridSearchRow, HyperParamGrids, RandomForestModel,
};
pub use linear::{fit_linear, LinearModel};
pub use power::{fit_power, predict_power, PowerFeatures, PowerModel};
