use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate modulus: composite vanishes or is not finite at s = {s:e}")]
    DegenerateModulus { s: f64 },

    /// The requested level lies below `G(0+)`, which is finite for non-Osgood composites.
    #[error("value {g} is below the attainable range; G(0+) = {floor_value}")]
    Range { g: f64, floor_value: f64 },

    #[error("certification refused: {0}")]
    CertificationRefused(String),

    #[error("no measure snapshot covers t = {0}")]
    TemporalDomain(f64),

    #[error("integration failure at t = {t}, species {species}, x = {x:?}")]
    Integration { t: f64, species: usize, x: Vec<f64> },

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("resolution error: {0}")]
    Resolution(String),

    #[error("registration error: {0}")]
    Registration(String),

    #[error("quadrature did not reach tolerance: {0}")]
    Quadrature(String),

    #[error("validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error("unknown preset: {0}")]
    UnknownPreset(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
