//! Routing statistics over SMoA gates and parameter accounting.

mod params;
mod routing;

pub use params::{
    measure_forward_time, param_report, scale_report, EncoderDims, ForwardTiming, NamespaceCount,
    ParamReport, ScaleReport,
};
pub use routing::{
    counts_by_subset, name_prefix, pearson_corr, record_routing, routing_distribution,
    FamilyContrast, RoutingAnalysis, RoutingRecord, RoutingTrace,
};
