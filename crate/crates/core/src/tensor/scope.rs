//! Residency and release discipline.
//!
//! Tensors live on a [`Backend`]. Only the reference (CPU) backend ships; an
//! accelerator plugs in through [`Accelerator`] with explicit transfer and
//! release. [`with_scope`] mirrors MATLAB-style autodestruct: tensors created
//! inside the closure are invalidated when it returns, except the returned one.

use std::cell::RefCell;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, OnceLock, Weak};

use super::{DType, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Backend {
    Reference,
    Accelerated,
}

/// Device boundary for an accelerated backend.
pub trait Accelerator: Send + Sync {
    fn name(&self) -> &str;
    fn supports(&self, dtype: DType) -> bool;
    /// Copy a reference tensor to the device.
    fn upload(&self, t: &Tensor) -> Result<Tensor>;
    /// Copy a device tensor back to host memory.
    fn download(&self, t: &Tensor) -> Result<Tensor>;
    fn release(&self, t: &mut Tensor);
}

static ACCELERATOR: OnceLock<Box<dyn Accelerator>> = OnceLock::new();

/// Install the process-wide accelerator. Fails if one is already installed.
pub fn install_accelerator(acc: Box<dyn Accelerator>) -> Result<()> {
    ACCELERATOR
        .set(acc)
        .map_err(|_| Error::BackendUnavailable("an accelerator is already installed".into()))
}

/// A copy of `t` resident on `target`.
pub fn to_backend(t: &Tensor, target: Backend) -> Result<Tensor> {
    t.check()?;
    match (t.backend(), target) {
        (Backend::Reference, Backend::Reference) => Ok(t.clone()),
        (_, Backend::Accelerated) | (Backend::Accelerated, _) => {
            let acc = ACCELERATOR
                .get()
                .ok_or_else(|| Error::BackendUnavailable("no accelerator installed".into()))?;
            if !acc.supports(t.dtype()) {
                return Err(Error::UnsupportedDType { op: "to_backend", dtype: t.dtype() });
            }
            if target == Backend::Accelerated {
                acc.upload(t)
            } else {
                acc.download(t)
            }
        }
    }
}

impl Tensor {
    /// Re-tag a buffer as device-resident; for [`Accelerator`] implementations.
    pub fn with_backend(mut self, backend: Backend) -> Tensor {
        self.backend = backend;
        self
    }
}

thread_local! {
    static SCOPES: RefCell<Vec<Vec<Weak<AtomicBool>>>> = const { RefCell::new(Vec::new()) };
}

pub(super) fn register(flag: &Arc<AtomicBool>) {
    SCOPES.with(|s| {
        if let Some(top) = s.borrow_mut().last_mut() {
            top.push(Arc::downgrade(flag));
        }
    });
}

struct ScopeGuard {
    keep: Option<Arc<AtomicBool>>,
}

impl Drop for ScopeGuard {
    fn drop(&mut self) {
        let registered = SCOPES.with(|s| s.borrow_mut().pop()).unwrap_or_default();
        for weak in registered {
            if let Some(flag) = weak.upgrade() {
                if self.keep.as_ref().is_some_and(|k| Arc::ptr_eq(k, &flag)) {
                    register(&flag);
                } else {
                    flag.store(false, Ordering::Release);
                }
            }
        }
    }
}

/// Run `body` in a release scope. Every tensor allocated inside is released
/// on exit except the returned one, which moves to the enclosing scope.
pub fn with_scope<F>(body: F) -> Result<Tensor>
where
    F: FnOnce() -> Result<Tensor>,
{
    SCOPES.with(|s| s.borrow_mut().push(Vec::new()));
    let mut guard = ScopeGuard { keep: None };
    let out = body();
    if let Ok(t) = &out {
        guard.keep = Some(Arc::clone(&t.live.0));
    }
    drop(guard);
    out
}
