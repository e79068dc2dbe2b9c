use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    /// A forward or training computation produced NaN or infinity.
    #[error("numeric overflow in {context}")]
    NumericOverflow { context: String },

    #[error("degenerate distribution: {0}")]
    Degenerate(String),

    #[error("jacobian storage needs {needed} bytes, budget is {budget} bytes")]
    MemoryBudget { needed: usize, budget: usize },

    /// Training diverged; carries the position where the loss stopped being finite.
    #[error("training diverged at epoch {epoch}, batch {batch} (loss = {loss})")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    /// `row` is the 1-based data row (header excluded), `column` the header name.
    #[error("parse error at row {row}, column '{column}': {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}

pub(crate) fn arg_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Argument(msg.into()))
}
