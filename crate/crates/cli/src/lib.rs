//! Local translation service: the `/v1` HTTP API and the helpers shared with
//! the `localmt` command-line tool.

pub mod service;

use localmt::bench::BenchError;
use localmt::pipeline::PipelineError;
use localmt::registry::RegistryError;

/// Process exit codes.
pub const EXIT_OK: u8 = 0;
pub const EXIT_VALIDATION: u8 = 1;
pub const EXIT_IO: u8 = 2;

/// Marks an error as caused by invalid user input.
#[derive(Debug)]
pub struct Invalid(pub String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

/// Exit code for a failed command: 2 for I/O and network trouble, 1 for
/// everything the user can fix by changing the input.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Invalid>() {
            return EXIT_VALIDATION;
        }
        if let Some(e) = cause.downcast_ref::<RegistryError>() {
            return if e.is_validation() { EXIT_VALIDATION } else { EXIT_IO };
        }
        if let Some(e) = cause.downcast_ref::<BenchError>() {
            return match e {
                BenchError::Input(_) => EXIT_IO,
                BenchError::Pipeline(_) => EXIT_VALIDATION,
            };
        }
        if cause.is::<PipelineError>() {
            return EXIT_VALIDATION;
        }
        if cause.is::<std::io::Error>() {
            return EXIT_IO;
        }
    }
    EXIT_IO
}
