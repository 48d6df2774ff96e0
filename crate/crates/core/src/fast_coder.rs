//! Loader for the optional accelerated range coder.
//!
//! The accelerated coder is a shared library exporting C-ABI functions with
//! the `cdc_rc_v1_` prefix. It must produce exactly the bytes of
//! [`crate::range_coder`]. When no library is found, or its version
//! handshake fails, [`Backend::detect`] logs why and falls back to the
//! reference coder.

use std::path::{Path, PathBuf};

use libloading::Library;
use thiserror::Error;

use crate::range_coder::{self, CoderError, PackedTables};

/// Payload format implemented by this crate's reference coder.
pub const PAYLOAD_FORMAT_VERSION: u32 = 1;
pub const SYMBOL_PREFIX: &str = "cdc_rc_v1_";
/// Environment variable naming the library to load.
pub const LIBRARY_ENV: &str = "CDC_FAST_CODER";

pub const STATUS_OK: i32 = 0;
pub const STATUS_TABLE_MISMATCH: i32 = 1;
pub const STATUS_CORRUPT: i32 = 2;
pub const STATUS_BUFFER_TOO_SMALL: i32 = 3;

type VersionFn = unsafe extern "C" fn() -> u32;

type EncodeFn = unsafe extern "C" fn(
    symbols: *const i32,
    rows: *const u32,
    n: usize,
    cdf: *const u16,
    cdf_len: usize,
    offsets: *const u32,
    lo: *const i32,
    n_rows: usize,
    out: *mut u8,
    out_cap: usize,
    out_len: *mut usize,
    msg: *mut u8,
    msg_cap: usize,
) -> i32;

type DecodeFn = unsafe extern "C" fn(
    bytes: *const u8,
    n_bytes: usize,
    rows: *const u32,
    n: usize,
    cdf: *const u16,
    cdf_len: usize,
    offsets: *const u32,
    lo: *const i32,
    n_rows: usize,
    out: *mut i32,
    msg: *mut u8,
    msg_cap: usize,
) -> i32;

#[derive(Debug, Error)]
pub enum FastCoderError {
    #[error("cannot load {path}: {source}")]
    Load { path: PathBuf, source: libloading::Error },
    #[error("missing symbol {0}")]
    Symbol(String),
    #[error("library implements payload format {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
}

pub fn check_version(found: u32) -> Result<(), FastCoderError> {
    if found == PAYLOAD_FORMAT_VERSION {
        Ok(())
    } else {
        Err(FastCoderError::Version { found, expected: PAYLOAD_FORMAT_VERSION })
    }
}

pub struct FastCoder {
    encode: EncodeFn,
    decode: DecodeFn,
    path: PathBuf,
    // Keeps the function pointers valid.
    _lib: Library,
}

fn status_error(status: i32, msg: &[u8]) -> CoderError {
    let end = msg.iter().position(|&b| b == 0).unwrap_or(msg.len());
    let text = String::from_utf8_lossy(&msg[..end]).into_owned();
    match status {
        STATUS_TABLE_MISMATCH => CoderError::TableMismatch(text),
        _ => CoderError::Corrupt(format!("status {status}: {text}")),
    }
}

impl FastCoder {
    pub fn load(path: &Path) -> Result<Self, FastCoderError> {
        // SAFETY: loading runs the library's initializers; the library is
        // trusted to the same degree as any linked dependency.
        let lib = unsafe { Library::new(path) }.map_err(|source| FastCoderError::Load { path: path.to_path_buf(), source })?;
        let sym = |name: &str| format!("{SYMBOL_PREFIX}{name}");
        // SAFETY: the signatures match the documented C ABI of the library.
        unsafe {
            let version: VersionFn =
                *lib.get::<VersionFn>(sym("version").as_bytes()).map_err(|_| FastCoderError::Symbol(sym("version")))?;
            check_version(version())?;
            let encode: EncodeFn =
                *lib.get::<EncodeFn>(sym("encode").as_bytes()).map_err(|_| FastCoderError::Symbol(sym("encode")))?;
            let decode: DecodeFn =
                *lib.get::<DecodeFn>(sym("decode").as_bytes()).map_err(|_| FastCoderError::Symbol(sym("decode")))?;
            Ok(Self { encode, decode, path: path.to_path_buf(), _lib: lib })
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn encode(&self, symbols: &[i32], rows: &[u32], t: &PackedTables) -> Result<Vec<u8>, CoderError> {
        if symbols.len() != rows.len() {
            return Err(CoderError::LengthMismatch(symbols.len(), rows.len()));
        }
        t.validate()?;
        let mut cap = 12 * symbols.len() + 16;
        let mut msg = [0u8; 256];
        loop {
            let mut out = vec![0u8; cap];
            let mut len = 0usize;
            // SAFETY: every pointer/length pair describes a live buffer.
            let status = unsafe {
                (self.encode)(
                    symbols.as_ptr(),
                    rows.as_ptr(),
                    symbols.len(),
                    t.cdf.as_ptr(),
                    t.cdf.len(),
                    t.offsets.as_ptr(),
                    t.lo.as_ptr(),
                    t.rows(),
                    out.as_mut_ptr(),
                    out.len(),
                    &mut len,
                    msg.as_mut_ptr(),
                    msg.len(),
                )
            };
            match status {
                STATUS_OK if len <= cap => {
                    out.truncate(len);
                    return Ok(out);
                }
                STATUS_BUFFER_TOO_SMALL => cap = len.max(cap * 2),
                _ => return Err(status_error(status, &msg)),
            }
        }
    }

    pub fn decode(&self, bytes: &[u8], rows: &[u32], t: &PackedTables) -> Result<Vec<i32>, CoderError> {
        t.validate()?;
        let mut out = vec![0i32; rows.len()];
        let mut msg = [0u8; 256];
        // SAFETY: every pointer/length pair describes a live buffer.
        let status = unsafe {
            (self.decode)(
                bytes.as_ptr(),
                bytes.len(),
                rows.as_ptr(),
                rows.len(),
                t.cdf.as_ptr(),
                t.cdf.len(),
                t.offsets.as_ptr(),
                t.lo.as_ptr(),
                t.rows(),
                out.as_mut_ptr(),
                msg.as_mut_ptr(),
                msg.len(),
            )
        };
        if status == STATUS_OK {
            Ok(out)
        } else {
            Err(status_error(status, &msg))
        }
    }
}

/// The coder used for payloads.
pub enum Backend {
    Reference,
    Fast(FastCoder),
}

impl Backend {
    /// Try `explicit`, then `$CDC_FAST_CODER`, then the platform library name
    /// next to the running executable. Falls back to the reference coder.
    pub fn detect(explicit: Option<&Path>) -> Self {
        let mut candidates: Vec<PathBuf> = Vec::new();
        if let Some(p) = explicit {
            candidates.push(p.to_path_buf());
        } else {
            if let Some(p) = std::env::var_os(LIBRARY_ENV) {
                candidates.push(PathBuf::from(p));
            }
            if let Some(dir) = std::env::current_exe().ok().and_then(|e| e.parent().map(Path::to_path_buf)) {
                candidates.push(dir.join(libloading::library_filename("cdc_rc_fast")));
            }
        }
        for path in candidates.iter().filter(|p| p.exists()) {
            match FastCoder::load(path) {
                Ok(fc) => {
                    log::info!("using accelerated range coder from {}", path.display());
                    return Backend::Fast(fc);
                }
                Err(e) => log::info!("accelerated range coder unavailable ({e}); using reference coder"),
            }
        }
        if candidates.iter().all(|p| !p.exists()) {
            log::info!("no accelerated range coder found; using reference coder");
        }
        Backend::Reference
    }

    pub fn name(&self) -> &'static str {
        match self {
            Backend::Reference => "reference",
            Backend::Fast(_) => "fast",
        }
    }

    pub fn encode(&self, symbols: &[i32], rows: &[u32], t: &PackedTables) -> Result<Vec<u8>, CoderError> {
        match self {
            Backend::Reference => range_coder::encode(symbols, rows, t),
            Backend::Fast(f) => f.encode(symbols, rows, t),
        }
    }

    pub fn decode(&self, bytes: &[u8], rows: &[u32], t: &PackedTables) -> Result<Vec<i32>, CoderError> {
        match self {
            Backend::Reference => range_coder::decode(bytes, rows, t),
            Backend::Fast(f) => f.decode(bytes, rows, t),
        }
    }
}
