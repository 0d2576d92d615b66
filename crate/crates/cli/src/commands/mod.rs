pub mod mosaic;
pub mod phis;
pub mod scale_eq;
pub mod tome;
pub mod train;
pub mod viz;
