//! Small shared helpers for file creation and jsonl line handling.

use std::fs::{File, OpenOptions};
use std::io;
use std::path::Path;

/// Open `path` for writing. Without `overwrite`, an existing file is an
/// `AlreadyExists` error instead of being clobbered.
pub(crate) fn create_file(path: &Path, overwrite: bool) -> io::Result<File> {
    if overwrite {
        File::create(path)
    } else {
        OpenOptions::new().write(true).create_new(true).open(path)
    }
}

/// Iterate non-empty lines of a text file together with 1-based line numbers.
pub(crate) fn numbered_lines(
    reader: impl io::BufRead,
) -> impl Iterator<Item = io::Result<(usize, String)>> {
    reader
        .lines()
        .enumerate()
        .map(|(idx, line)| line.map(|l| (idx + 1, l)))
        .filter(|item| !matches!(item, Ok((_, l)) if l.trim().is_empty()))
}
