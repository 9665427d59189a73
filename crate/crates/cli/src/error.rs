use thiserror::Error;

use needlesim::evaluation::EvalError;
use needlesim::phantom::PhantomError;
use needlesim::planner::PlanError;
use needlesim::report::ReportError;
use needlesim::study::StudyError;
use needlesim::tissue::TissueError;
use needlesim::volume::VolumeError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Tissue(#[from] TissueError),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Study(#[from] StudyError),
    #[error("server: {0}")]
    Serve(String),
}

impl CliError {
    /// Stable name of the module that failed.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Io(_) => "io",
            CliError::Volume(_) => "volume",
            CliError::Tissue(_) => "tissue_model",
            CliError::Phantom(_) => "phantom",
            CliError::Plan(_) => "path_planner",
            CliError::Eval(_) => "evaluation",
            CliError::Report(_) => "report",
            CliError::Study(e) => match e {
                StudyError::Eval(_) => "evaluation",
                StudyError::Plan(_) => "path_planner",
                StudyError::Phantom(_) => "phantom",
                StudyError::Tissue(_) => "tissue_model",
                StudyError::Volume(_) => "volume",
                StudyError::NoPaths(_) => "study",
            },
            CliError::Serve(_) => "trainer_service",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
