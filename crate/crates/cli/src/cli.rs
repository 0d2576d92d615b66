use std::path::PathBuf;

use agglo_core::distill::HighResMode;
use agglo_core::Direction;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "agglo", version, about = "Multi-teacher distillation toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Teacher standardization and fidelity
    #[command(subcommand)]
    Phis(PhisCmd),
    /// Strided bipartite token merging
    #[command(subcommand)]
    Tome(TomeCmd),
    /// Mosaic packing for fixed-resolution teachers
    #[command(subcommand)]
    Mosaic(MosaicCmd),
    /// Scale variance of a feature series, or a teacher over a resolution ladder
    ScaleEq(ScaleEqArgs),
    /// Toy distillation runs
    #[command(subcommand)]
    Train(TrainCmd),
    /// PCA feature visualization as a PPM image
    Viz(VizArgs),
}

#[derive(Subcommand, Debug)]
pub enum PhisCmd {
    /// Fit a transform on feature maps
    Fit {
        #[arg(long, required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Fit on this many randomly drawn tokens instead of all of them
        #[arg(long, requires = "seed")]
        samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Standardize a feature map
    Apply(TransformIo),
    /// Map standardized features back to the teacher space
    Invert(TransformIo),
    /// Fidelity from (phi², MSE), from a student/teacher pair, or for a table
    Fidelity(FidelityArgs),
}

#[derive(Args, Debug)]
pub struct TransformIo {
    #[arg(long)]
    pub transform: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct FidelityArgs {
    #[arg(long, conflicts_with = "transform")]
    pub phi_sq: Option<f64>,
    /// Take phi² from a fitted transform
    #[arg(long)]
    pub transform: Option<PathBuf>,
    #[arg(long, conflicts_with_all = ["student", "teacher"])]
    pub mse: Option<f64>,
    #[arg(long, requires = "teacher")]
    pub student: Option<PathBuf>,
    #[arg(long, requires = "student")]
    pub teacher: Option<PathBuf>,
    /// JSON list of {"teacher", "phi_sq", "mse"} rows
    #[arg(long, conflicts_with_all = ["phi_sq", "transform", "mse", "student"])]
    pub table: Option<PathBuf>,
    /// Decimal places in the printed values
    #[arg(long, default_value_t = 3)]
    pub precision: u32,
}

#[derive(Args, Debug, Clone)]
pub struct MergeArgs {
    /// Sink stride (square)
    #[arg(long, conflicts_with = "budget")]
    pub stride: Option<usize>,
    #[arg(long, requires = "stride")]
    pub r: Option<usize>,
    /// Survivor budget; picks the stride and r
    #[arg(long)]
    pub budget: Option<usize>,
    /// Sink lattice offset (row, column)
    #[arg(long, num_args = 2, value_names = ["Y", "X"])]
    pub offset: Option<Vec<usize>>,
}

#[derive(Subcommand, Debug)]
pub enum TomeCmd {
    /// Build a merge plan
    Plan {
        #[arg(long, required_unless_present_any = ["input", "criterion"])]
        rows: Option<usize>,
        #[arg(long, required_unless_present_any = ["input", "criterion"])]
        cols: Option<usize>,
        /// Tokens to match on; without them all affinities tie
        #[arg(long = "in")]
        input: Option<PathBuf>,
        /// Matching criterion grid (e.g. keys) replacing the tokens
        #[arg(long)]
        criterion: Option<PathBuf>,
        #[command(flatten)]
        merge: MergeArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Plan and merge tokens into a 1 x M x C map
    Compress {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Where the merge plan is written
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        criterion: Option<PathBuf>,
        #[command(flatten)]
        merge: MergeArgs,
    },
    /// Broadcast compressed tokens back onto the grid
    Reconstruct {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Relative reconstruction error of a merge round trip
    Error {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, conflicts_with = "plan")]
        criterion: Option<PathBuf>,
        /// Reuse a stored plan instead of planning
        #[arg(long)]
        plan: Option<PathBuf>,
        #[command(flatten)]
        merge: MergeArgs,
    },
}

#[derive(Args, Debug)]
pub struct LayoutArgs {
    /// Student (sub-image) resolution
    #[arg(long)]
    pub res: usize,
    #[arg(long)]
    pub canvas: usize,
    #[arg(long)]
    pub patch: usize,
    /// Randomize sub-image placement inside cells
    #[arg(long)]
    pub jitter_seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum MosaicCmd {
    /// Print the packing geometry, optionally saving it
    Layout {
        #[command(flatten)]
        layout: LayoutArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pack up to k² images (PPM or FMAP) onto one canvas
    Pack {
        #[command(flatten)]
        layout: LayoutArgs,
        #[arg(required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value_t = 0.0)]
        pad_value: f64,
        /// Canvas path; PPM or FMAP by extension
        #[arg(long)]
        out: PathBuf,
        /// Where the layout JSON is written
        #[arg(long = "layout")]
        layout_out: PathBuf,
    },
    /// Cut per-image token blocks out of canvas features
    Crop {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        layout: PathBuf,
        /// Number of images on the canvas (defaults to all cells)
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Args, Debug)]
pub struct ScaleEqArgs {
    /// Feature maps of one image at several resolutions
    #[arg(long, num_args = 2.., required_unless_present = "suite", conflicts_with = "suite")]
    pub inputs: Vec<PathBuf>,
    /// Suite manifest (JSON): teacher, images (count or files), resolutions or ladders, optional tile
    #[arg(long)]
    pub suite: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_direction, default_value = "down")]
    pub direction: Direction,
}

fn parse_direction(s: &str) -> Result<Direction, String> {
    s.parse()
}

#[derive(Subcommand, Debug)]
pub enum TrainCmd {
    /// Train a student from a JSON configuration
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the configuration's seed
        #[arg(long)]
        seed: u64,
        /// Line-delimited JSON training log
        #[arg(long)]
        log: Option<PathBuf>,
        /// Final parameter vector as JSON
        #[arg(long)]
        params_out: Option<PathBuf>,
    },
    /// Finite-difference check of the student's gradients
    GradCheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 256)]
        samples: usize,
        #[arg(long, default_value_t = 2)]
        images: usize,
        /// Student resolution (defaults to the first partition's)
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
        /// Flip the sign of one analytic gradient entry
        #[arg(long)]
        mutate: bool,
    },
    /// Segregated versus multi-resolution training
    ModeSwitch {
        #[arg(long)]
        seed: u64,
        /// JSON overrides of the experiment settings
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long, value_enum)]
        high_res_mode: Option<HighResModeArg>,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum HighResModeArg {
    Mosaic,
    PadCrop,
}

impl From<HighResModeArg> for HighResMode {
    fn from(m: HighResModeArg) -> Self {
        match m {
            HighResModeArg::Mosaic => HighResMode::Mosaic,
            HighResModeArg::PadCrop => HighResMode::PadCrop,
        }
    }
}

#[derive(Args, Debug)]
pub struct VizArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Integer nearest-neighbour upscaling factor
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    pub scale: u32,
}
