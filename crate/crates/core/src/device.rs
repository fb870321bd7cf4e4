//! Simulated device memory.
//!
//! Device buffers live in host memory but are only reachable through opaque
//! addresses in a disjoint address range. User-visible host<->device copies
//! charge a [`CopyCostModel`] to the calling PE's clock; the transport and
//! "kernels" touch device bytes through the uncharged raw accessors.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::{Arc, Mutex, RwLock};

use thiserror::Error;

use crate::time::{transfer_ns, us_to_ns, Nanos, PeClock};

/// Start of the device address range. Never a valid user-space host address.
pub const DEVICE_BASE: u64 = 0xD000_0000_0000_0000;
const ALIGN: u64 = 256;
pub const DEFAULT_CAPACITY: u64 = 4 << 30;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DeviceError {
    #[error("device allocation of {requested} bytes on pe {pe} exceeds capacity ({in_use} of {capacity} in use)")]
    OutOfMemory {
        pe: u32,
        requested: u64,
        in_use: u64,
        capacity: u64,
    },
    #[error("address {0:#x} is not a live device buffer")]
    NotDevice(u64),
    #[error("region {addr:#x}+{len} exceeds its device buffer")]
    OutOfBounds { addr: u64, len: u64 },
    #[error("copy size mismatch: destination {dst} bytes, source {src} bytes")]
    SizeMismatch { dst: u64, src: u64 },
}

/// Modeled cost of explicit host<->device copies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CopyCostModel {
    pub h2d_latency: Nanos,
    pub d2h_latency: Nanos,
    /// bytes / second
    pub h2d_bandwidth: f64,
    pub d2h_bandwidth: f64,
}

impl Default for CopyCostModel {
    fn default() -> Self {
        CopyCostModel::symmetric(5.0, 10e9)
    }
}

impl CopyCostModel {
    pub fn new(h2d_latency_us: f64, d2h_latency_us: f64, h2d_bw: f64, d2h_bw: f64) -> Self {
        assert!(h2d_latency_us >= 0.0 && d2h_latency_us >= 0.0);
        assert!(h2d_bw > 0.0 && d2h_bw > 0.0);
        CopyCostModel {
            h2d_latency: us_to_ns(h2d_latency_us),
            d2h_latency: us_to_ns(d2h_latency_us),
            h2d_bandwidth: h2d_bw,
            d2h_bandwidth: d2h_bw,
        }
    }

    pub fn symmetric(latency_us: f64, bandwidth: f64) -> Self {
        Self::new(latency_us, latency_us, bandwidth, bandwidth)
    }

    pub fn h2d_latency_us(&self) -> f64 {
        self.h2d_latency as f64 / 1e3
    }

    pub fn d2h_latency_us(&self) -> f64 {
        self.d2h_latency as f64 / 1e3
    }

    pub fn h2d_cost(&self, bytes: u64) -> Nanos {
        self.h2d_latency + transfer_ns(bytes, self.h2d_bandwidth)
    }

    pub fn d2h_cost(&self, bytes: u64) -> Nanos {
        self.d2h_latency + transfer_ns(bytes, self.d2h_bandwidth)
    }
}

/// Handle to a live device allocation.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct DeviceBuffer {
    addr: u64,
    size: u64,
    owner: u32,
}

impl fmt::Debug for DeviceBuffer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DeviceBuffer({:#x}, {} B, pe {})", self.addr, self.size, self.owner)
    }
}

impl DeviceBuffer {
    pub fn addr(&self) -> u64 {
        self.addr
    }

    pub fn size(&self) -> u64 {
        self.size
    }

    pub fn len(&self) -> usize {
        self.size as usize
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn owner(&self) -> u32 {
        self.owner
    }

    pub fn region(&self) -> DeviceRegion {
        DeviceRegion {
            addr: self.addr,
            len: self.size,
        }
    }

    /// Sub-range starting `offset` bytes into the buffer.
    pub fn slice(&self, offset: u64, len: u64) -> DeviceRegion {
        assert!(offset + len <= self.size, "slice out of bounds");
        DeviceRegion {
            addr: self.addr + offset,
            len,
        }
    }
}

/// Address range inside (possibly an interior part of) a device buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DeviceRegion {
    pub addr: u64,
    pub len: u64,
}

impl From<DeviceBuffer> for DeviceRegion {
    fn from(b: DeviceBuffer) -> Self {
        b.region()
    }
}

impl From<&DeviceBuffer> for DeviceRegion {
    fn from(b: &DeviceBuffer) -> Self {
        b.region()
    }
}

struct Allocation {
    size: u64,
    owner: u32,
    // u64 words keep f64 views aligned.
    words: Mutex<Vec<u64>>,
}

impl Allocation {
    fn new(size: u64, owner: u32) -> Self {
        Allocation {
            size,
            owner,
            words: Mutex::new(vec![0u64; size.div_ceil(8) as usize]),
        }
    }
}

#[derive(Default)]
struct Registry {
    live: BTreeMap<u64, Arc<Allocation>>,
    in_use: HashMap<u32, u64>,
    next: u64,
}

struct SpaceInner {
    registry: RwLock<Registry>,
    cost: CopyCostModel,
    capacity: u64,
}

/// The process-wide device address space. Clones share state.
#[derive(Clone)]
pub struct DeviceSpace {
    inner: Arc<SpaceInner>,
}

impl fmt::Debug for DeviceSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let reg = self.inner.registry.read().unwrap();
        f.debug_struct("DeviceSpace")
            .field("live", &reg.live.len())
            .field("cost", &self.inner.cost)
            .finish()
    }
}

impl Default for DeviceSpace {
    fn default() -> Self {
        DeviceSpace::new(CopyCostModel::default(), DEFAULT_CAPACITY)
    }
}

impl DeviceSpace {
    pub fn new(cost: CopyCostModel, capacity_per_pe: u64) -> Self {
        DeviceSpace {
            inner: Arc::new(SpaceInner {
                registry: RwLock::new(Registry {
                    next: DEVICE_BASE,
                    ..Registry::default()
                }),
                cost,
                capacity: capacity_per_pe,
            }),
        }
    }

    pub fn cost_model(&self) -> CopyCostModel {
        self.inner.cost
    }

    pub fn alloc(&self, pe: u32, size: u64) -> Result<DeviceBuffer, DeviceError> {
        let mut reg = self.inner.registry.write().unwrap();
        let in_use = reg.in_use.get(&pe).copied().unwrap_or(0);
        if in_use + size > self.inner.capacity {
            return Err(DeviceError::OutOfMemory {
                pe,
                requested: size,
                in_use,
                capacity: self.inner.capacity,
            });
        }
        let addr = reg.next;
        reg.next += size.max(1).div_ceil(ALIGN) * ALIGN;
        reg.live.insert(addr, Arc::new(Allocation::new(size, pe)));
        *reg.in_use.entry(pe).or_default() += size;
        Ok(DeviceBuffer {
            addr,
            size,
            owner: pe,
        })
    }

    pub fn free(&self, buf: DeviceBuffer) -> Result<(), DeviceError> {
        let mut reg = self.inner.registry.write().unwrap();
        let alloc = reg
            .live
            .remove(&buf.addr)
            .ok_or(DeviceError::NotDevice(buf.addr))?;
        if let Some(used) = reg.in_use.get_mut(&alloc.owner) {
            *used -= alloc.size;
        }
        Ok(())
    }

    /// True iff `addr` lies inside a live buffer. Zero-length buffers own
    /// their base address.
    pub fn is_device_address(&self, addr: u64) -> bool {
        self.lookup(addr).is_some()
    }

    /// Bytes currently allocated by `pe`.
    pub fn in_use(&self, pe: u32) -> u64 {
        let reg = self.inner.registry.read().unwrap();
        reg.in_use.get(&pe).copied().unwrap_or(0)
    }

    pub fn live_count(&self) -> usize {
        self.inner.registry.read().unwrap().live.len()
    }

    fn lookup(&self, addr: u64) -> Option<(u64, Arc<Allocation>)> {
        let reg = self.inner.registry.read().unwrap();
        let (&base, alloc) = reg.live.range(..=addr).next_back()?;
        if addr - base < alloc.size.max(1) {
            Some((base, alloc.clone()))
        } else {
            None
        }
    }

    fn resolve(&self, region: DeviceRegion) -> Result<(usize, Arc<Allocation>), DeviceError> {
        let (base, alloc) = self
            .lookup(region.addr)
            .ok_or(DeviceError::NotDevice(region.addr))?;
        let offset = region.addr - base;
        if offset + region.len > alloc.size {
            return Err(DeviceError::OutOfBounds {
                addr: region.addr,
                len: region.len,
            });
        }
        Ok((offset as usize, alloc))
    }

    /// Owner PE of the buffer containing `addr`.
    pub fn owner_of(&self, addr: u64) -> Option<u32> {
        self.lookup(addr).map(|(_, a)| a.owner)
    }

    /// Uncharged read of device bytes.
    pub fn read(&self, region: impl Into<DeviceRegion>) -> Result<Vec<u8>, DeviceError> {
        let region = region.into();
        let (off, alloc) = self.resolve(region)?;
        let words = alloc.words.lock().unwrap();
        let bytes: &[u8] = bytemuck::cast_slice(&words);
        Ok(bytes[off..off + region.len as usize].to_vec())
    }

    /// Uncharged write of device bytes; `src` must fill the region exactly.
    pub fn write(&self, region: impl Into<DeviceRegion>, src: &[u8]) -> Result<(), DeviceError> {
        let region = region.into();
        if region.len != src.len() as u64 {
            return Err(DeviceError::SizeMismatch {
                dst: region.len,
                src: src.len() as u64,
            });
        }
        let (off, alloc) = self.resolve(region)?;
        let mut words = alloc.words.lock().unwrap();
        let bytes: &mut [u8] = bytemuck::cast_slice_mut(&mut words);
        bytes[off..off + src.len()].copy_from_slice(src);
        Ok(())
    }

    /// Runs `f` over the whole buffer viewed as `f64`s. Stands in for a kernel.
    pub fn with_f64<R>(
        &self,
        buf: &DeviceBuffer,
        f: impl FnOnce(&[f64]) -> R,
    ) -> Result<R, DeviceError> {
        let (_, alloc) = self.resolve(buf.region())?;
        let words = alloc.words.lock().unwrap();
        let n = (buf.size / 8) as usize;
        Ok(f(&bytemuck::cast_slice::<u64, f64>(&words)[..n]))
    }

    pub fn with_f64_mut<R>(
        &self,
        buf: &DeviceBuffer,
        f: impl FnOnce(&mut [f64]) -> R,
    ) -> Result<R, DeviceError> {
        let (_, alloc) = self.resolve(buf.region())?;
        let mut words = alloc.words.lock().unwrap();
        let n = (buf.size / 8) as usize;
        Ok(f(&mut bytemuck::cast_slice_mut::<u64, f64>(&mut words)[..n]))
    }

    /// Host -> device copy, charging `latency + size / bandwidth` to `clock`.
    pub fn copy_host_to_device(
        &self,
        clock: &PeClock,
        dst: impl Into<DeviceRegion>,
        src: &[u8],
    ) -> Result<Nanos, DeviceError> {
        self.write(dst, src)?;
        let cost = self.inner.cost.h2d_cost(src.len() as u64);
        clock.charge(cost);
        Ok(cost)
    }

    /// Device -> host copy, charging the d2h cost to `clock`.
    pub fn copy_device_to_host(
        &self,
        clock: &PeClock,
        dst: &mut [u8],
        src: impl Into<DeviceRegion>,
    ) -> Result<Nanos, DeviceError> {
        let src = src.into();
        if src.len != dst.len() as u64 {
            return Err(DeviceError::SizeMismatch {
                dst: dst.len() as u64,
                src: src.len,
            });
        }
        let bytes = self.read(src)?;
        dst.copy_from_slice(&bytes);
        let cost = self.inner.cost.d2h_cost(src.len);
        clock.charge(cost);
        Ok(cost)
    }

    /// Device -> device copy. Treated as a kernel: not charged.
    pub fn copy_device_to_device(
        &self,
        dst: impl Into<DeviceRegion>,
        src: impl Into<DeviceRegion>,
    ) -> Result<(), DeviceError> {
        let (dst, src) = (dst.into(), src.into());
        if dst.len != src.len {
            return Err(DeviceError::SizeMismatch {
                dst: dst.len,
                src: src.len,
            });
        }
        let bytes = self.read(src)?;
        self.write(dst, &bytes)
    }
}
