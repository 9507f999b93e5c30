//! Support code for the `elm-lda` command-line tool.

pub mod fetch;

use elm_lda::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

/// Process exit code for an error: 4 numerical, 3 data, 2 anything else
/// (configuration and usage).
pub fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        EXIT_NUMERICAL
    } else if e.is_data() {
        EXIT_DATA
    } else {
        EXIT_CONFIG
    }
}
