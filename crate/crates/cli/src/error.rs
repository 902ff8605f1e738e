//! Machine-readable errors: `{stage, code, message}` on stderr.

use georeg::geodesy_metrics::MetricsError;
use georeg::geometry::GeometryError;
use georeg::gravity::GravityError;
use georeg::icp::IcpError;
use georeg::lifting::LiftError;
use georeg::match_filter::FilterError;
use georeg::raster_io::RasterError;
use georeg::registration::RegistrationError;
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CliError {
    pub stage: String,
    pub code: String,
    pub message: String,
    /// Usage errors exit with 1, data errors with 2.
    #[serde(skip)]
    pub usage: bool,
}

impl CliError {
    pub fn data(stage: &str, code: &str, message: impl Into<String>) -> Self {
        Self { stage: stage.into(), code: code.into(), message: message.into(), usage: false }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self { stage: "cli".into(), code: "Usage".into(), message: message.into(), usage: true }
    }

    pub fn exit_code(&self) -> i32 {
        if self.usage {
            1
        } else {
            2
        }
    }

    fn config(stage: &str, message: String) -> Self {
        Self { stage: stage.into(), code: "InvalidConfig".into(), message, usage: true }
    }
}

impl From<RasterError> for CliError {
    fn from(e: RasterError) -> Self {
        let code = match &e {
            RasterError::Io { .. } => "Io",
            RasterError::Format(_) => "Format",
            RasterError::Shape(_) => "ShapeMismatch",
            RasterError::InvalidValue(_) => "InvalidValue",
            RasterError::OutOfBounds { .. } => "OutOfBounds",
            RasterError::NoDataAtPixel { .. } => "NoDataAtPixel",
            RasterError::Json { .. } => "Json",
        };
        Self::data("io", code, e.to_string())
    }
}

impl From<GeometryError> for CliError {
    fn from(e: GeometryError) -> Self {
        match e {
            GeometryError::InvalidConfig(m) => Self::config("geometry", m),
            GeometryError::DegenerateInput(_) => Self::data("geometry", "DegenerateInput", e.to_string()),
            GeometryError::NoConsensus { .. } => Self::data("geometry", "NoConsensus", e.to_string()),
            GeometryError::InvalidTransform(_) => Self::data("geometry", "InvalidTransform", e.to_string()),
        }
    }
}

impl From<FilterError> for CliError {
    fn from(e: FilterError) -> Self {
        match e {
            FilterError::InvalidConfig(m) => Self::config("match_filter", m),
            FilterError::Raster(r) => r.into(),
            FilterError::EmptyResult { .. } => Self::data("match_filter", "EmptyResult", e.to_string()),
            FilterError::ShapeMismatch(_) => Self::data("match_filter", "ShapeMismatch", e.to_string()),
            FilterError::Csv { .. } => Self::data("io", "Csv", e.to_string()),
        }
    }
}

impl From<LiftError> for CliError {
    fn from(e: LiftError) -> Self {
        match e {
            LiftError::Raster(r) => r.into(),
            LiftError::EmptyResult { .. } => Self::data("lifting", "EmptyResult", e.to_string()),
            LiftError::Csv { .. } => Self::data("io", "Csv", e.to_string()),
        }
    }
}

impl From<RegistrationError> for CliError {
    fn from(e: RegistrationError) -> Self {
        match e {
            RegistrationError::Filter(f) => f.into(),
            RegistrationError::Lift(l) => l.into(),
            RegistrationError::Ransac(GeometryError::InvalidConfig(m)) => Self::config("ransac", m),
            RegistrationError::InvalidConfig(m) => Self::config("registration", m),
            RegistrationError::Load { .. } => Self::data("io", "Io", e.to_string()),
            _ => Self::data(e.stage(), e.code(), e.to_string()),
        }
    }
}

impl From<GravityError> for CliError {
    fn from(e: GravityError) -> Self {
        let code = match &e {
            GravityError::Geometry(g) => return g.clone().into(),
            GravityError::TooFewGroundPoints { .. } => "TooFewGroundPoints",
            GravityError::MissingMask(_) => "MissingMask",
            GravityError::NoIntersections => "NoIntersections",
            GravityError::Ambiguous(_) => "Ambiguous",
        };
        Self::data("gravity", code, e.to_string())
    }
}

impl From<IcpError> for CliError {
    fn from(e: IcpError) -> Self {
        let code = match &e {
            IcpError::Geometry(g) => return g.clone().into(),
            IcpError::NoCorrespondences { .. } => "NoCorrespondences",
            IcpError::Diverged { .. } => "Diverged",
            IcpError::InvalidInput(_) => "InvalidInput",
        };
        Self::data("icp", code, e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        let code = match &e {
            MetricsError::ShapeMismatch(_) => "ShapeMismatch",
            MetricsError::SingularCovariance => "SingularCovariance",
            MetricsError::InvalidInput(_) => "InvalidInput",
        };
        Self::data("evaluate", code, e.to_string())
    }
}
