//! Benchmark tasks: the first-order PDE regression, time-series
//! extrapolation, Burgers characteristics and small synthetic datasets.

mod burgers;
mod pde;
mod timeseries;
mod toy;

pub use pde::{
    analytic_u, gen_pde_dataset, node_pde_baseline, pde_fit, percent_deviation, NodePdeModel,
    PdeFit, PdeFitConfig, PdeModel, PdePoint, PdeRegressionTask,
};
pub use timeseries::{
    gen_timeseries, timeseries_eval, SeriesModelKind, SeriesPoint, TimeSeriesConfig,
    TimeSeriesReport, TimeSeriesTask, Window,
};
pub use burgers::{burgers_characteristics, first_crossing, BurgersDemo, Characteristic, Crossing};
pub use toy::{
    gen_toy2d, scalar_cnode, scalar_node, two_point_task, ToyKind, ToyTask2D, ANNULUS_HALF_WIDTH,
    MIXTURE_MEAN,
};
