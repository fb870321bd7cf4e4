//! Python bindings: a started runtime with one endpoint chare per PE,
//! channels between those endpoints, and simulated device buffers.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::mpsc;
use std::sync::Mutex;
use std::time::Duration;

use charmlet::channel::{Channel, RecvBuf, SendBuf};
use charmlet::config::Config;
use charmlet::device::{DeviceBuffer as Buffer, DeviceRegion};
use charmlet::runtime::{
    ArrayProxy, Chare, ChareType, Message, Pe, RunningRuntime, Runtime as Core, RuntimeError, StopPolicy,
    TransferResult,
};
use charmlet::time::TimeMode;
use charmlet::transport::PeId;
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyTimeoutError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

create_exception!(charmlet_py, CharmletError, PyException);

thread_local! {
    /// Channel endpoints owned by the PE running on this thread, by (id, pe).
    static CHANNELS: RefCell<HashMap<(u64, PeId), Channel>> = RefCell::new(HashMap::new());
}

fn err(e: impl std::fmt::Display) -> PyErr {
    CharmletError::new_err(e.to_string())
}

struct Endpoint;

impl Chare for Endpoint {
    fn entry(&mut self, _: &Pe, _: Message) -> Result<(), RuntimeError> {
        Ok(())
    }
}

/// A simulated device allocation.
#[pyclass(frozen, skip_from_py_object, module = "charmlet_py")]
#[derive(Clone, Copy)]
struct DeviceBuffer {
    buf: Buffer,
}

#[pymethods]
impl DeviceBuffer {
    #[getter]
    fn addr(&self) -> u64 {
        self.buf.addr()
    }

    #[getter]
    fn size(&self) -> u64 {
        self.buf.size()
    }

    #[getter]
    fn owner(&self) -> u32 {
        self.buf.owner()
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.buf)
    }
}

/// Outcome of a finished send or receive.
#[pyclass(frozen, get_all, module = "charmlet_py")]
struct Completion {
    /// Bytes transferred.
    len: usize,
    tag: u64,
    /// Completion time in nanoseconds.
    timestamp: u64,
    /// Received bytes for host receives, otherwise None.
    data: Option<Py<PyBytes>>,
}

/// A pending send or receive.
#[pyclass(module = "charmlet_py")]
struct Request {
    rx: Mutex<mpsc::Receiver<Result<TransferResult, String>>>,
}

#[pymethods]
impl Request {
    /// Blocks until the transfer completes. `timeout` is in seconds.
    #[pyo3(signature = (timeout=None))]
    fn wait(&self, py: Python<'_>, timeout: Option<f64>) -> PyResult<Completion> {
        let got = py.detach(|| {
            let rx = self.rx.lock().unwrap();
            match timeout {
                Some(s) => rx.recv_timeout(Duration::from_secs_f64(s)).map_err(|e| match e {
                    mpsc::RecvTimeoutError::Timeout => None,
                    mpsc::RecvTimeoutError::Disconnected => Some(()),
                }),
                None => rx.recv().map_err(|_| Some(())),
            }
        });
        let res = match got {
            Ok(r) => r,
            Err(None) => return Err(PyTimeoutError::new_err("transfer did not complete in time")),
            Err(Some(())) => return Err(err("runtime stopped before the transfer completed")),
        };
        let info = res.map_err(err)?.map_err(err)?;
        Ok(Completion {
            len: info.len,
            tag: info.tag.raw(),
            timestamp: info.timestamp,
            data: info.data.map(|d| PyBytes::new(py, &d).unbind()),
        })
    }
}

/// A running runtime with `pes` PEs. Endpoint `i` of every channel call
/// is the chare living on PE `i`.
#[pyclass(module = "charmlet_py")]
struct Runtime {
    rt: Option<RunningRuntime>,
    endpoints: ArrayProxy,
}

impl Runtime {
    fn running(&self) -> PyResult<&RunningRuntime> {
        self.rt.as_ref().ok_or_else(|| err("runtime has been shut down"))
    }

    fn check_pe(&self, pe: PeId) -> PyResult<()> {
        if (pe as usize) < self.endpoints.len() {
            Ok(())
        } else {
            Err(PyValueError::new_err(format!("PE {pe} out of range")))
        }
    }

    fn call<R: Send + 'static>(
        &self,
        py: Python<'_>,
        pe: PeId,
        f: impl FnOnce(&Pe) -> R + Send + 'static,
    ) -> PyResult<R> {
        self.check_pe(pe)?;
        let rt = self.running()?;
        py.detach(|| rt.call(pe, f)).map_err(err)
    }

    /// Issues a transfer on PE `pe`'s endpoint of channel `id`.
    fn transfer(
        &self,
        py: Python<'_>,
        pe: PeId,
        id: u64,
        op: impl FnOnce(&Channel) -> Result<charmlet::runtime::Transfer, RuntimeError> + Send + 'static,
    ) -> PyResult<Request> {
        let (tx, rx) = mpsc::channel();
        self.call(py, pe, move |p| {
            let ch = CHANNELS.with(|m| m.borrow().get(&(id, p.id())).cloned());
            let Some(ch) = ch else {
                return Err(format!("no endpoint of channel {id} on PE {}", p.id()));
            };
            let t = op(&ch).map_err(|e| e.to_string())?;
            p.spawn(async move {
                let _ = tx.send(Ok(t.await));
            });
            Ok(())
        })?
        .map_err(err)?;
        Ok(Request { rx: Mutex::new(rx) })
    }
}

#[pymethods]
impl Runtime {
    /// `config` is a TOML config path; `time_mode` is "wall" or "virtual".
    #[new]
    #[pyo3(signature = (pes=2, time_mode="virtual", config=None))]
    fn new(pes: usize, time_mode: &str, config: Option<&str>) -> PyResult<Self> {
        let mode: TimeMode = time_mode.parse().map_err(PyValueError::new_err)?;
        let cfg = match config {
            Some(path) => Config::load(path).map_err(err)?,
            None => Config::default(),
        };
        let core = Core::new(cfg.with_workers(pes).with_time_mode(mode)).map_err(err)?;
        let ty = core
            .register(ChareType::new("py-endpoint", |_, _| Endpoint).entry("unused"))
            .map_err(err)?;
        let endpoints = core.create_array_on(ty, (0..pes as PeId).collect()).map_err(err)?;
        let rt = core.start(StopPolicy::Explicit, |_| {}).map_err(err)?;
        Ok(Runtime { rt: Some(rt), endpoints })
    }

    #[getter]
    fn num_pes(&self) -> usize {
        self.endpoints.len()
    }

    /// Creates both endpoints of channel `id` between PEs `a` and `b`.
    fn open_channel(&self, py: Python<'_>, id: u64, a: PeId, b: PeId) -> PyResult<()> {
        self.check_pe(b)?;
        let (ea, eb) = (self.endpoints.element(a), self.endpoints.element(b));
        for (pe, local, peer) in [(a, ea, eb), (b, eb, ea)] {
            self.call(py, pe, move |p| {
                let ch = Channel::create(p, id, local, peer)?;
                CHANNELS.with(|m| m.borrow_mut().insert((id, p.id()), ch));
                Ok::<_, RuntimeError>(())
            })?
            .map_err(err)?;
            if a == b {
                break;
            }
        }
        Ok(())
    }

    /// Sends `data` (bytes or a DeviceBuffer) from PE `pe` on channel `id`.
    fn send(&self, py: Python<'_>, id: u64, pe: PeId, data: &Bound<'_, PyAny>) -> PyResult<Request> {
        let buf = match data.cast::<DeviceBuffer>() {
            Ok(d) => SendBuf::Device(d.get().buf.region()),
            Err(_) => SendBuf::Host(data.extract::<Vec<u8>>()?),
        };
        self.transfer(py, pe, id, move |ch| ch.send_async(buf))
    }

    /// Receives on PE `pe` into a DeviceBuffer, or into host memory when
    /// `dest` is a byte capacity.
    fn recv(&self, py: Python<'_>, id: u64, pe: PeId, dest: &Bound<'_, PyAny>) -> PyResult<Request> {
        let buf = match dest.cast::<DeviceBuffer>() {
            Ok(d) => RecvBuf::Device(d.get().buf.region()),
            Err(_) => RecvBuf::Host {
                capacity: dest.extract()?,
            },
        };
        self.transfer(py, pe, id, move |ch| ch.recv_async(buf))
    }

    /// Allocates `size` bytes of device memory owned by PE `pe`.
    fn alloc(&self, pe: PeId, size: u64) -> PyResult<DeviceBuffer> {
        self.check_pe(pe)?;
        let buf = self.running()?.device().alloc(pe, size).map_err(err)?;
        Ok(DeviceBuffer { buf })
    }

    fn free(&self, buf: &DeviceBuffer) -> PyResult<()> {
        self.running()?.device().free(buf.buf).map_err(err)
    }

    /// Host to device copy on the owning PE. Returns the charged nanoseconds.
    fn copy_to_device(&self, py: Python<'_>, buf: &DeviceBuffer, data: Vec<u8>) -> PyResult<u64> {
        let region = sub_region(buf, data.len())?;
        self.call(py, buf.buf.owner(), move |p| {
            p.device().copy_host_to_device(p.clock(), region, &data)
        })?
        .map_err(err)
    }

    /// Device to host copy on the owning PE.
    fn copy_to_host<'py>(&self, py: Python<'py>, buf: &DeviceBuffer) -> PyResult<Bound<'py, PyBytes>> {
        let b = buf.buf;
        let bytes = self
            .call(py, b.owner(), move |p| {
                let mut out = vec![0; b.len()];
                p.device().copy_device_to_host(p.clock(), &mut out, b).map(|_| out)
            })?
            .map_err(err)?;
        Ok(PyBytes::new(py, &bytes))
    }

    /// Current clock of PE `pe` in nanoseconds.
    fn now(&self, py: Python<'_>, pe: PeId) -> PyResult<u64> {
        self.call(py, pe, |p| p.now())
    }

    /// Stops every PE and waits for them.
    fn shutdown(&mut self, py: Python<'_>) -> PyResult<()> {
        let Some(rt) = self.rt.take() else {
            return Ok(());
        };
        rt.shutdown();
        py.detach(|| rt.join()).map(|_| ()).map_err(err)
    }

    fn __enter__(slf: Py<Self>) -> Py<Self> {
        slf
    }

    fn __exit__(
        &mut self,
        py: Python<'_>,
        _ty: Option<&Bound<'_, PyAny>>,
        _value: Option<&Bound<'_, PyAny>>,
        _tb: Option<&Bound<'_, PyAny>>,
    ) -> PyResult<bool> {
        self.shutdown(py)?;
        Ok(false)
    }
}

impl Drop for Runtime {
    fn drop(&mut self) {
        if let Some(rt) = self.rt.take() {
            rt.shutdown();
            let _ = rt.join();
        }
    }
}

fn sub_region(buf: &DeviceBuffer, len: usize) -> PyResult<DeviceRegion> {
    if len as u64 > buf.buf.size() {
        return Err(PyValueError::new_err(format!(
            "{len} bytes do not fit in a {} byte buffer",
            buf.buf.size()
        )));
    }
    Ok(buf.buf.slice(0, len as u64))
}

#[pymodule]
fn charmlet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Runtime>()?;
    m.add_class::<DeviceBuffer>()?;
    m.add_class::<Request>()?;
    m.add_class::<Completion>()?;
    m.add("CharmletError", m.py().get_type::<CharmletError>())?;
    Ok(())
}
