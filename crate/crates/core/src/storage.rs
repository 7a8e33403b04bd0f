//! Disks, memory devices and network links as fair-shared bandwidth resources.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::rc::Rc;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::sim::{ResourceId, Sim};

/// One megabyte as used for bandwidth figures (10^6 bytes).
pub const MB: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    pub name: String,
    /// Bytes.
    pub capacity: u64,
    /// Bytes per second.
    pub read_bw: f64,
    /// Bytes per second.
    pub write_bw: f64,
    /// Seconds added once per non-empty transfer.
    #[serde(default)]
    pub latency: f64,
}

impl DeviceSpec {
    pub fn symmetric(name: impl Into<String>, capacity: u64, bandwidth: f64) -> Self {
        DeviceSpec {
            name: name.into(),
            capacity,
            read_bw: bandwidth,
            write_bw: bandwidth,
            latency: 0.0,
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.capacity == 0 {
            return Err(format!("device `{}`: capacity must be > 0", self.name));
        }
        for (what, bw) in [("read_bw", self.read_bw), ("write_bw", self.write_bw)] {
            if !(bw > 0.0 && bw.is_finite()) {
                return Err(format!("device `{}`: {what} must be > 0, got {bw}", self.name));
            }
        }
        if !(self.latency >= 0.0 && self.latency.is_finite()) {
            return Err(format!("device `{}`: latency must be >= 0", self.name));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    pub name: String,
    /// Bytes per second.
    pub bandwidth: f64,
    #[serde(default)]
    pub latency: f64,
}

impl LinkSpec {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(format!("link `{}`: bandwidth must be > 0", self.name));
        }
        if !(self.latency >= 0.0 && self.latency.is_finite()) {
            return Err(format!("link `{}`: latency must be >= 0", self.name));
        }
        Ok(())
    }
}

/// A storage device attached to a running simulation.
///
/// Reads and writes share one resource whose capacity is the read bandwidth;
/// writes are scaled by `read_bw / write_bw` so an uncontended write of `D`
/// bytes still takes `D / write_bw`.
pub struct StorageDevice {
    spec: DeviceSpec,
    sim: Sim,
    resource: ResourceId,
    files: RefCell<BTreeMap<Arc<str>, u64>>,
    used: Cell<u64>,
    bytes_read: Cell<u64>,
    bytes_written: Cell<u64>,
}

impl StorageDevice {
    pub fn attach(sim: &Sim, spec: DeviceSpec) -> Result<Rc<Self>> {
        spec.validate().map_err(SimError::Config)?;
        let resource = sim.add_resource(spec.name.clone(), spec.read_bw)?;
        Ok(Rc::new(StorageDevice {
            spec,
            sim: sim.clone(),
            resource,
            files: RefCell::new(BTreeMap::new()),
            used: Cell::new(0),
            bytes_read: Cell::new(0),
            bytes_written: Cell::new(0),
        }))
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn spec(&self) -> &DeviceSpec {
        &self.spec
    }

    pub fn resource(&self) -> ResourceId {
        self.resource
    }

    /// Timed read of `amount` bytes; returns the elapsed time.
    pub async fn read(&self, amount: u64) -> Result<f64> {
        let t = self.serve(amount, amount as f64).await?;
        self.bytes_read.set(self.bytes_read.get() + amount);
        Ok(t)
    }

    /// Timed write of `amount` bytes; returns the elapsed time.
    pub async fn write(&self, amount: u64) -> Result<f64> {
        let work = if self.spec.write_bw == self.spec.read_bw {
            amount as f64
        } else {
            amount as f64 * (self.spec.read_bw / self.spec.write_bw)
        };
        let t = self.serve(amount, work).await?;
        self.bytes_written.set(self.bytes_written.get() + amount);
        Ok(t)
    }

    /// Bytes read by completed reads.
    pub fn bytes_read(&self) -> u64 {
        self.bytes_read.get()
    }

    /// Bytes written by completed writes.
    pub fn bytes_written(&self) -> u64 {
        self.bytes_written.get()
    }

    async fn serve(&self, amount: u64, work: f64) -> Result<f64> {
        if amount > self.spec.capacity {
            return Err(SimError::Config(format!(
                "transfer of {amount} bytes exceeds capacity of device `{}` ({} bytes)",
                self.spec.name, self.spec.capacity
            )));
        }
        if amount == 0 {
            return Ok(0.0);
        }
        let start = self.sim.now();
        self.sim.sleep(self.spec.latency).await;
        let end = self.sim.transfer_work(self.resource, work).await?;
        Ok(end - start)
    }

    pub fn used(&self) -> u64 {
        self.used.get()
    }

    pub fn file_size(&self, name: &str) -> Option<u64> {
        self.files.borrow().get(name).copied()
    }

    pub fn files(&self) -> Vec<(String, u64)> {
        self.files
            .borrow()
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect()
    }

    /// Creates (or truncates and replaces) a file of `size` bytes.
    pub fn create_file(&self, name: &str, size: u64) -> Result<()> {
        let old = self.file_size(name).unwrap_or(0);
        let available = self.spec.capacity - (self.used.get() - old);
        if size > available {
            return Err(SimError::DeviceFull {
                device: self.spec.name.clone(),
                needed: size,
                available,
            });
        }
        self.files.borrow_mut().insert(Arc::from(name), size);
        self.used.set(self.used.get() - old + size);
        Ok(())
    }

    /// Grows an existing file by `bytes`.
    pub fn append(&self, name: &str, bytes: u64) -> Result<()> {
        let available = self.spec.capacity - self.used.get();
        if bytes > available {
            return Err(SimError::DeviceFull {
                device: self.spec.name.clone(),
                needed: bytes,
                available,
            });
        }
        let mut files = self.files.borrow_mut();
        let size = files
            .get_mut(name)
            .ok_or_else(|| SimError::FileNotFound(name.to_string()))?;
        *size += bytes;
        self.used.set(self.used.get() + bytes);
        Ok(())
    }

    pub fn remove_file(&self, name: &str) -> Option<u64> {
        let size = self.files.borrow_mut().remove(name)?;
        self.used.set(self.used.get() - size);
        Some(size)
    }
}

/// A network link shared fairly between concurrent transfers.
pub struct NetworkLink {
    spec: LinkSpec,
    sim: Sim,
    resource: ResourceId,
}

impl NetworkLink {
    pub fn attach(sim: &Sim, spec: LinkSpec) -> Result<Rc<Self>> {
        spec.validate().map_err(SimError::Config)?;
        let resource = sim.add_resource(spec.name.clone(), spec.bandwidth)?;
        Ok(Rc::new(NetworkLink {
            spec,
            sim: sim.clone(),
            resource,
        }))
    }

    pub fn spec(&self) -> &LinkSpec {
        &self.spec
    }

    pub fn resource(&self) -> ResourceId {
        self.resource
    }

    /// Latency, then fair-shared service of `amount` bytes. An empty transfer
    /// still pays the latency.
    pub async fn transfer(&self, amount: u64) -> Result<f64> {
        let start = self.sim.now();
        self.sim.sleep(self.spec.latency).await;
        let end = self.sim.transfer(self.resource, amount).await?;
        Ok(end - start)
    }
}
