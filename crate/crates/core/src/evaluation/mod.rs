//! Quantitative evaluation: SSIM / PSNR / RMSE tables and ROI characteristics.

mod metrics;
mod report;
mod roi;

pub use metrics::{gaussian_taps, mse, psnr, rmse, ssim, ssim_map, SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW};
pub use report::{
    evaluate_models, first_slice_roi, metrics_row, write_bar_chart, write_report, Evaluation, MetricsRow, MetricsTable,
    ReportFiles, SPARSE_ROW,
};
pub use roi::{roi_report, RoiEntry, RoiReport};
