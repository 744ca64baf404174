use std::fmt;

use geokernel::gradcheck::GradcheckError;
use geokernel::irl::IrlError;
use geokernel::kernelnet::KernelError;
use geokernel::simgen::SimError;

/// Failure of a command: bad input (exit 2) or a failure while running it
/// (exit 1).
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        CliError::Runtime(format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::InvalidSpec(_) | SimError::Parse { .. } => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<IrlError> for CliError {
    fn from(e: IrlError) -> Self {
        match e {
            IrlError::Config(_) | IrlError::Checkpoint(_) | IrlError::NoSamples => CliError::Usage(e.to_string()),
            IrlError::Kernel(k) => k.into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<KernelError> for CliError {
    fn from(e: KernelError) -> Self {
        match e {
            KernelError::Config(_) | KernelError::Checkpoint(_) | KernelError::DescriptorDim { .. } => {
                CliError::Usage(e.to_string())
            }
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<GradcheckError> for CliError {
    fn from(e: GradcheckError) -> Self {
        match e {
            GradcheckError::Config(_) => CliError::Usage(e.to_string()),
            GradcheckError::Irl(i) => i.into(),
            GradcheckError::Sim(s) => s.into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}
