//! Permission-typed parameter store.
//!
//! Every parameter carries one of four modes. Which task may read or write a
//! parameter depends only on its mode and owner:
//!
//! | mode       | owner reads | owner writes | others read | others write |
//! |------------|-------------|--------------|-------------|--------------|
//! | `Swr`      | yes         | yes          | yes         | yes          |
//! | `Pwr`      | yes         | yes          | no          | no           |
//! | `Pr`       | yes         | no           | yes         | no           |
//! | `NoAccess` | no          | no           | no          | no           |
//!
//! `Swr` parameters are owned by [`Owner::Shared`]; everything else belongs to
//! exactly one task. A `Pr` alias exposes another task's `Pwr` tensor to
//! readers without copying it.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, Read, Write};

use indexmap::IndexMap;

use crate::tensorcore::GradientMap;
use crate::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PRAWNCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

const SHARED_OWNER: &str = "shared";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum ParamMode {
    /// Sharable, writable, readable.
    Swr,
    /// Private, writable, readable.
    Pwr,
    /// Private, read-only.
    Pr,
    /// Private, neither readable nor writable. Inert storage.
    NoAccess,
}

impl ParamMode {
    pub const ALL: [ParamMode; 4] = [ParamMode::Swr, ParamMode::Pwr, ParamMode::Pr, ParamMode::NoAccess];

    /// Only the four effective combinations exist.
    pub fn from_flags(sharable: bool, writable: bool, readable: bool) -> Result<Self, RegistryError> {
        match (sharable, writable, readable) {
            (true, true, true) => Ok(ParamMode::Swr),
            (false, true, true) => Ok(ParamMode::Pwr),
            (false, false, true) => Ok(ParamMode::Pr),
            (false, false, false) => Ok(ParamMode::NoAccess),
            _ => Err(RegistryError::InvalidMode { sharable, writable, readable }),
        }
    }

    fn code(self) -> u8 {
        match self {
            ParamMode::Swr => 0,
            ParamMode::Pwr => 1,
            ParamMode::Pr => 2,
            ParamMode::NoAccess => 3,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for ParamMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ParamMode::Swr => "swr",
            ParamMode::Pwr => "s\u{304}wr",
            ParamMode::Pr => "s\u{304}w\u{304}r",
            ParamMode::NoAccess => "s\u{304}w\u{304}r\u{304}",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Owner {
    Shared,
    Task(String),
}

impl Owner {
    pub fn task(id: impl Into<String>) -> Self {
        Owner::Task(id.into())
    }

    fn as_str(&self) -> &str {
        match self {
            Owner::Shared => SHARED_OWNER,
            Owner::Task(t) => t,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error("no effective mode is sharable={sharable}, writable={writable}, readable={readable}")]
    InvalidMode { sharable: bool, writable: bool, readable: bool },
    #[error("parameter id `{0}` is already registered")]
    Duplicate(String),
    #[error("parameter `{id}`: mode {mode} is inconsistent with owner `{owner}`")]
    ModeOwner { id: String, mode: ParamMode, owner: String },
    #[error("parameter `{0}` has mode s\u{304}w\u{304}r\u{304} and cannot be exposed to readers")]
    InertReaders(String),
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("task `{task}` may not write parameter `{param}` (mode {mode})")]
    Permission { task: String, param: String, mode: ParamMode },
    #[error("task `{task}` may not read parameter `{param}` (mode {mode})")]
    ReadPermission { task: String, param: String, mode: ParamMode },
    #[error("registry is frozen; `{0}` cannot be registered")]
    Frozen(String),
    #[error("invalid task id `{0}`")]
    InvalidTaskId(String),
    #[error("gradient for `{id}` has shape {got:?}, parameter has {expected:?}")]
    GradShape { id: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("snapshot does not match registry: {0}")]
    Snapshot(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
enum Storage {
    Owned(Tensor),
    Alias(String),
}

/// A registered parameter: an owned tensor or a read-only alias of one.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    id: String,
    mode: ParamMode,
    owner: Owner,
    storage: Storage,
}

impl ParamTensor {
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn mode(&self) -> ParamMode {
        self.mode
    }

    pub fn owner(&self) -> &Owner {
        &self.owner
    }

    /// Target id when this entry is an alias.
    pub fn alias_of(&self) -> Option<&str> {
        match &self.storage {
            Storage::Alias(t) => Some(t),
            Storage::Owned(_) => None,
        }
    }
}

/// A task's identity and the private parameters it owns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskAgent {
    pub id: String,
    pub dataset: String,
    pub head: Vec<String>,
    pub private_encoder: Vec<String>,
}

impl TaskAgent {
    pub fn new(id: impl Into<String>, dataset: impl Into<String>) -> Self {
        Self { id: id.into(), dataset: dataset.into(), head: Vec::new(), private_encoder: Vec::new() }
    }
}

/// Per-parameter update rule used by [`Registry::apply_update`].
pub trait StepRule {
    fn update(&mut self, id: &str, param: &mut Tensor, grad: &Tensor);
}

/// Deep copy of every owned parameter value.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    values: BTreeMap<String, Tensor>,
}

impl Snapshot {
    pub fn get(&self, id: &str) -> Option<&Tensor> {
        self.values.get(id)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Registry {
    params: IndexMap<String, ParamTensor>,
    tasks: IndexMap<String, TaskAgent>,
    frozen: bool,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_task(&mut self, agent: TaskAgent) -> Result<(), RegistryError> {
        if self.frozen {
            return Err(RegistryError::Frozen(agent.id));
        }
        if agent.id.is_empty() || agent.id == SHARED_OWNER {
            return Err(RegistryError::InvalidTaskId(agent.id));
        }
        if self.tasks.contains_key(&agent.id) {
            return Err(RegistryError::Duplicate(agent.id));
        }
        let (id, head, enc) = (agent.id.clone(), agent.head.clone(), agent.private_encoder.clone());
        self.tasks.insert(id.clone(), TaskAgent { head: vec![], private_encoder: vec![], ..agent });
        if !head.is_empty() {
            self.assign_head(&id, &head)?;
        }
        if !enc.is_empty() {
            self.assign_private_encoder(&id, &enc)?;
        }
        Ok(())
    }

    pub fn register(&mut self, id: &str, tensor: Tensor, mode: ParamMode, owner: Owner) -> Result<&ParamTensor, RegistryError> {
        if self.frozen {
            return Err(RegistryError::Frozen(id.to_string()));
        }
        if self.params.contains_key(id) {
            return Err(RegistryError::Duplicate(id.to_string()));
        }
        match (&owner, mode) {
            (Owner::Shared, ParamMode::Swr) => {}
            (Owner::Task(t), m) if m != ParamMode::Swr => {
                if !self.tasks.contains_key(t) {
                    return Err(RegistryError::UnknownTask(t.clone()));
                }
            }
            _ => return Err(RegistryError::ModeOwner { id: id.to_string(), mode, owner: owner.as_str().to_string() }),
        }
        self.params.insert(id.to_string(), ParamTensor { id: id.to_string(), mode, owner, storage: Storage::Owned(tensor) });
        Ok(&self.params[id])
    }

    /// Exposes `target` to other tasks as a read-only (`Pr`) alias owned by
    /// the target's owner.
    pub fn register_alias(&mut self, alias: &str, target: &str) -> Result<&ParamTensor, RegistryError> {
        if self.frozen {
            return Err(RegistryError::Frozen(alias.to_string()));
        }
        if self.params.contains_key(alias) {
            return Err(RegistryError::Duplicate(alias.to_string()));
        }
        let t = self.params.get(target).ok_or_else(|| RegistryError::UnknownParam(target.to_string()))?;
        let owner = match (t.mode, &t.storage) {
            (ParamMode::NoAccess, _) => return Err(RegistryError::InertReaders(target.to_string())),
            (_, Storage::Alias(_)) | (ParamMode::Swr, _) => {
                return Err(RegistryError::ModeOwner { id: alias.to_string(), mode: ParamMode::Pr, owner: t.owner.as_str().to_string() })
            }
            _ => t.owner.clone(),
        };
        self.params.insert(
            alias.to_string(),
            ParamTensor { id: alias.to_string(), mode: ParamMode::Pr, owner, storage: Storage::Alias(target.to_string()) },
        );
        Ok(&self.params[alias])
    }

    fn check_owned_pwr(&self, task: &str, ids: &[String]) -> Result<(), RegistryError> {
        self.task(task)?;
        for id in ids {
            let p = self.param(id)?;
            if p.mode != ParamMode::Pwr || p.owner != Owner::task(task) || p.alias_of().is_some() {
                return Err(RegistryError::ModeOwner { id: id.clone(), mode: p.mode, owner: p.owner.as_str().to_string() });
            }
        }
        Ok(())
    }

    /// Output-layer parameters must be `Pwr` parameters owned by `task`.
    pub fn assign_head(&mut self, task: &str, ids: &[String]) -> Result<(), RegistryError> {
        self.check_owned_pwr(task, ids)?;
        self.tasks[task].head = ids.to_vec();
        Ok(())
    }

    pub fn assign_private_encoder(&mut self, task: &str, ids: &[String]) -> Result<(), RegistryError> {
        self.check_owned_pwr(task, ids)?;
        self.tasks[task].private_encoder = ids.to_vec();
        Ok(())
    }

    /// Ends registration. Values stay mutable through [`Registry::apply_update`].
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn task(&self, id: &str) -> Result<&TaskAgent, RegistryError> {
        self.tasks.get(id).ok_or_else(|| RegistryError::UnknownTask(id.to_string()))
    }

    pub fn tasks(&self) -> impl Iterator<Item = &TaskAgent> {
        self.tasks.values()
    }

    pub fn task_ids(&self) -> Vec<String> {
        self.tasks.keys().cloned().collect()
    }

    pub fn param(&self, id: &str) -> Result<&ParamTensor, RegistryError> {
        self.params.get(id).ok_or_else(|| RegistryError::UnknownParam(id.to_string()))
    }

    pub fn params(&self) -> impl Iterator<Item = &ParamTensor> {
        self.params.values()
    }

    /// Ids of all `Swr` parameters, in registration order.
    pub fn shared_ids(&self) -> Vec<String> {
        self.params.values().filter(|p| p.mode == ParamMode::Swr).map(|p| p.id.clone()).collect()
    }

    /// Current value, resolving aliases.
    pub fn value(&self, id: &str) -> Result<&Tensor, RegistryError> {
        match &self.param(id)?.storage {
            Storage::Owned(t) => Ok(t),
            Storage::Alias(target) => self.value(target),
        }
    }

    pub fn can_read(&self, task: &str, id: &str) -> Result<bool, RegistryError> {
        self.task(task)?;
        let p = self.param(id)?;
        Ok(match p.mode {
            ParamMode::Swr | ParamMode::Pr => true,
            ParamMode::Pwr => p.owner == Owner::task(task),
            ParamMode::NoAccess => false,
        })
    }

    pub fn can_write(&self, task: &str, id: &str) -> Result<bool, RegistryError> {
        self.task(task)?;
        let p = self.param(id)?;
        Ok(match p.mode {
            ParamMode::Swr => true,
            ParamMode::Pwr => p.owner == Owner::task(task),
            ParamMode::Pr | ParamMode::NoAccess => false,
        })
    }

    /// Shared parameters, the task's own private ones and every read-only
    /// parameter.
    pub fn readable_view(&self, task: &str) -> Result<Vec<&ParamTensor>, RegistryError> {
        self.task(task)?;
        let mut out = Vec::new();
        for p in self.params.values() {
            if self.can_read(task, &p.id)? {
                out.push(p);
            }
        }
        Ok(out)
    }

    /// Shared parameters and the task's own `Pwr` parameters.
    pub fn writable_view(&self, task: &str) -> Result<Vec<&ParamTensor>, RegistryError> {
        self.task(task)?;
        let mut out = Vec::new();
        for p in self.params.values() {
            if self.can_write(task, &p.id)? {
                out.push(p);
            }
        }
        Ok(out)
    }

    /// Applies `rule` to every gradient entry after checking that the whole
    /// map is writable by `task`. Nothing is modified on a permission error.
    pub fn apply_update(&mut self, task: &str, grads: &GradientMap, rule: &mut impl StepRule) -> Result<(), RegistryError> {
        for (id, g) in grads.iter() {
            if !self.can_write(task, id)? {
                return Err(RegistryError::Permission { task: task.to_string(), param: id.to_string(), mode: self.params[id].mode });
            }
            let current = self.value(id)?;
            if current.shape() != g.shape() {
                return Err(RegistryError::GradShape { id: id.to_string(), expected: current.shape().to_vec(), got: g.shape().to_vec() });
            }
        }
        for (id, g) in grads.iter() {
            if let Storage::Owned(t) = &mut self.params.get_mut(id).expect("checked above").storage {
                rule.update(id, t, g);
            }
        }
        Ok(())
    }

    /// Overwrites an owned parameter value, bypassing task permissions. Used
    /// when loading weights into a freshly built model.
    pub fn set_value(&mut self, id: &str, value: Tensor) -> Result<(), RegistryError> {
        let p = self.params.get_mut(id).ok_or_else(|| RegistryError::UnknownParam(id.to_string()))?;
        match &mut p.storage {
            Storage::Owned(t) if t.shape() == value.shape() => {
                *t = value;
                Ok(())
            }
            Storage::Owned(t) => {
                Err(RegistryError::GradShape { id: id.to_string(), expected: t.shape().to_vec(), got: value.shape().to_vec() })
            }
            Storage::Alias(_) => Err(RegistryError::ModeOwner { id: id.to_string(), mode: p.mode, owner: p.owner.as_str().to_string() }),
        }
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            values: self
                .params
                .values()
                .filter_map(|p| match &p.storage {
                    Storage::Owned(t) => Some((p.id.clone(), t.clone())),
                    Storage::Alias(_) => None,
                })
                .collect(),
        }
    }

    /// Restores every owned value; modes and owners are untouched.
    pub fn restore(&mut self, snapshot: &Snapshot) -> Result<(), RegistryError> {
        let owned: Vec<&str> = self.params.values().filter(|p| p.alias_of().is_none()).map(|p| p.id.as_str()).collect();
        if owned.len() != snapshot.values.len() || owned.iter().any(|id| !snapshot.values.contains_key(*id)) {
            return Err(RegistryError::Snapshot("parameter sets differ".into()));
        }
        for (id, v) in &snapshot.values {
            self.set_value(id, v.clone())?;
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, w: &mut impl Write) -> Result<(), RegistryError> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&[u8::from(self.frozen)])?;
        write_u32(w, self.tasks.len())?;
        for t in self.tasks.values() {
            write_str(w, &t.id)?;
            write_str(w, &t.dataset)?;
            write_strs(w, &t.head)?;
            write_strs(w, &t.private_encoder)?;
        }
        write_u32(w, self.params.len())?;
        for p in self.params.values() {
            write_str(w, &p.id)?;
            w.write_all(&[p.mode.code()])?;
            write_str(w, p.owner.as_str())?;
            match &p.storage {
                Storage::Owned(t) => {
                    w.write_all(&[0])?;
                    write_u32(w, t.shape().len())?;
                    for &d in t.shape() {
                        w.write_all(&(d as u64).to_le_bytes())?;
                    }
                    for v in t.data() {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
                Storage::Alias(target) => {
                    w.write_all(&[1])?;
                    write_str(w, target)?;
                }
            }
        }
        Ok(())
    }

    pub fn load_checkpoint(r: &mut impl Read) -> Result<Self, RegistryError> {
        let mut magic = [0u8; 8];
        read_exact(r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(RegistryError::Checkpoint("bad magic".into()));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(RegistryError::Checkpoint(format!("unsupported format version {version}")));
        }
        let frozen = match read_u8(r)? {
            0 => false,
            1 => true,
            b => return Err(RegistryError::Checkpoint(format!("bad frozen flag {b}"))),
        };
        let mut reg = Registry::new();
        for _ in 0..read_u32(r)? {
            let id = read_str(r)?;
            let dataset = read_str(r)?;
            let head = read_strs(r)?;
            let private_encoder = read_strs(r)?;
            reg.tasks.insert(id.clone(), TaskAgent { id, dataset, head, private_encoder });
        }
        for _ in 0..read_u32(r)? {
            let id = read_str(r)?;
            let code = read_u8(r)?;
            let mode = ParamMode::from_code(code).ok_or_else(|| RegistryError::Checkpoint(format!("bad mode code {code}")))?;
            let owner_str = read_str(r)?;
            let owner = if owner_str == SHARED_OWNER { Owner::Shared } else { Owner::Task(owner_str) };
            let storage = match read_u8(r)? {
                0 => {
                    let ndim = read_u32(r)?;
                    let mut shape = Vec::with_capacity(ndim as usize);
                    for _ in 0..ndim {
                        let mut b = [0u8; 8];
                        read_exact(r, &mut b)?;
                        shape.push(u64::from_le_bytes(b) as usize);
                    }
                    let n: usize = shape.iter().product();
                    let mut data = Vec::with_capacity(n);
                    for _ in 0..n {
                        let mut b = [0u8; 8];
                        read_exact(r, &mut b)?;
                        data.push(f64::from_le_bytes(b));
                    }
                    Storage::Owned(Tensor::new(&shape, data).map_err(|e| RegistryError::Checkpoint(e.to_string()))?)
                }
                1 => Storage::Alias(read_str(r)?),
                b => return Err(RegistryError::Checkpoint(format!("bad storage tag {b}"))),
            };
            if reg.params.contains_key(&id) {
                return Err(RegistryError::Duplicate(id));
            }
            reg.params.insert(id.clone(), ParamTensor { id, mode, owner, storage });
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(RegistryError::Checkpoint(format!("{} trailing bytes", rest.len())));
        }
        reg.frozen = frozen;
        Ok(reg)
    }
}

fn write_u32(w: &mut impl Write, n: usize) -> io::Result<()> {
    let n = u32::try_from(n).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "length exceeds u32"))?;
    w.write_all(&n.to_le_bytes())
}

fn write_str(w: &mut impl Write, s: &str) -> io::Result<()> {
    write_u32(w, s.len())?;
    w.write_all(s.as_bytes())
}

fn write_strs(w: &mut impl Write, items: &[String]) -> io::Result<()> {
    write_u32(w, items.len())?;
    items.iter().try_for_each(|s| write_str(w, s))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<(), RegistryError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => RegistryError::Checkpoint("truncated".into()),
        _ => RegistryError::Io(e),
    })
}

fn read_u8(r: &mut impl Read) -> Result<u8, RegistryError> {
    let mut b = [0u8; 1];
    read_exact(r, &mut b)?;
    Ok(b[0])
}

fn read_u32(r: &mut impl Read) -> Result<u32, RegistryError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_str(r: &mut impl Read) -> Result<String, RegistryError> {
    let n = read_u32(r)? as usize;
    let mut b = vec![0u8; n];
    read_exact(r, &mut b)?;
    String::from_utf8(b).map_err(|e| RegistryError::Checkpoint(e.to_string()))
}

fn read_strs(r: &mut impl Read) -> Result<Vec<String>, RegistryError> {
    (0..read_u32(r)?).map(|_| read_str(r)).collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    struct Sgd(f64);

    impl StepRule for Sgd {
        fn update(&mut self, _id: &str, param: &mut Tensor, grad: &Tensor) {
            for (p, g) in param.data_mut().iter_mut().zip(grad.data()) {
                *p -= self.0 * g;
            }
        }
    }

    fn two_task_registry() -> Registry {
        let mut r = Registry::new();
        r.add_task(TaskAgent::new("A", "a.tsv")).unwrap();
        r.add_task(TaskAgent::new("B", "b.tsv")).unwrap();
        r.register("enc.W", Tensor::zeros(&[50, 32]), ParamMode::Swr, Owner::Shared).unwrap();
        r.register("A.head", Tensor::zeros(&[32, 2]), ParamMode::Pwr, Owner::task("A")).unwrap();
        r.register("B.head", Tensor::zeros(&[32, 2]), ParamMode::Pwr, Owner::task("B")).unwrap();
        r.assign_head("A", &["A.head".into()]).unwrap();
        r.assign_head("B", &["B.head".into()]).unwrap();
        r
    }

    fn ids(view: Vec<&ParamTensor>) -> Vec<&str> {
        view.into_iter().map(|p| p.id()).collect()
    }

    #[test]
    fn registration_errors() {
        let mut r = two_task_registry();
        assert!(matches!(
            r.register("taskA.head", Tensor::zeros(&[1]), ParamMode::Swr, Owner::task("A")),
            Err(RegistryError::ModeOwner { .. })
        ));
        assert!(matches!(r.register("x", Tensor::zeros(&[1]), ParamMode::Pwr, Owner::Shared), Err(RegistryError::ModeOwner { .. })));
        assert!(matches!(r.register("enc.W", Tensor::zeros(&[1]), ParamMode::Swr, Owner::Shared), Err(RegistryError::Duplicate(_))));
        r.register("A.inert", Tensor::zeros(&[1]), ParamMode::NoAccess, Owner::task("A")).unwrap();
        assert!(matches!(r.register_alias("A.inert.view", "A.inert"), Err(RegistryError::InertReaders(_))));
        assert!(matches!(ParamMode::from_flags(true, false, true), Err(RegistryError::InvalidMode { .. })));
        assert!(matches!(r.register("C.x", Tensor::zeros(&[1]), ParamMode::Pwr, Owner::task("C")), Err(RegistryError::UnknownTask(_))));
        r.freeze();
        assert!(matches!(r.register("late", Tensor::zeros(&[1]), ParamMode::Swr, Owner::Shared), Err(RegistryError::Frozen(_))));
    }

    #[test]
    fn head_must_be_owned_pwr() {
        let mut r = two_task_registry();
        assert!(r.assign_head("A", &["B.head".into()]).is_err());
        assert!(r.assign_head("A", &["enc.W".into()]).is_err());
    }

    #[test]
    fn views() {
        let mut r = two_task_registry();
        assert_eq!(ids(r.readable_view("A").unwrap()), vec!["enc.W", "A.head"]);
        r.register("B.enc", Tensor::zeros(&[2, 2]), ParamMode::Pwr, Owner::task("B")).unwrap();
        r.register_alias("B.enc@read", "B.enc").unwrap();
        assert_eq!(ids(r.readable_view("A").unwrap()), vec!["enc.W", "A.head", "B.enc@read"]);
        assert_eq!(ids(r.writable_view("A").unwrap()), vec!["enc.W", "A.head"]);
        assert!(matches!(r.readable_view("Z"), Err(RegistryError::UnknownTask(_))));
        assert!(matches!(r.writable_view("Z"), Err(RegistryError::UnknownTask(_))));
    }

    #[test]
    fn update_respects_writability() {
        let mut r = two_task_registry();
        let mut g = GradientMap::new();
        g.insert("enc.W", Tensor::ones(&[50, 32]));
        g.insert("B.head", Tensor::ones(&[32, 2]));
        let before = r.snapshot();
        let err = r.apply_update("A", &g, &mut Sgd(0.1)).unwrap_err();
        match err {
            RegistryError::Permission { task, param, mode } => {
                assert_eq!((task.as_str(), param.as_str(), mode), ("A", "B.head", ParamMode::Pwr));
            }
            other => panic!("unexpected {other}"),
        }
        assert_eq!(r.snapshot(), before);
        r.apply_update("B", &g, &mut Sgd(0.1)).unwrap();
        assert_eq!(r.value("B.head").unwrap().data()[0], -0.1);
    }

    #[test]
    fn aliases_track_their_target_and_are_read_only() {
        let mut r = two_task_registry();
        r.register("B.enc", Tensor::zeros(&[1, 2]), ParamMode::Pwr, Owner::task("B")).unwrap();
        r.register_alias("B.enc@read", "B.enc").unwrap();
        let mut g = GradientMap::new();
        g.insert("B.enc", Tensor::ones(&[1, 2]));
        r.apply_update("B", &g, &mut Sgd(1.0)).unwrap();
        assert_eq!(r.value("B.enc@read").unwrap().data(), &[-1.0, -1.0]);
        let mut g = GradientMap::new();
        g.insert("B.enc@read", Tensor::ones(&[1, 2]));
        assert!(r.apply_update("B", &g, &mut Sgd(1.0)).is_err());
    }

    #[test]
    fn snapshot_restore_round_trip() {
        let mut r = two_task_registry();
        let snap = r.snapshot();
        let mut g = GradientMap::new();
        g.insert("enc.W", Tensor::ones(&[50, 32]));
        r.apply_update("A", &g, &mut Sgd(0.5)).unwrap();
        assert_ne!(r.snapshot(), snap);
        r.restore(&snap).unwrap();
        assert_eq!(r.snapshot(), snap);
        assert_eq!(r.param("enc.W").unwrap().mode(), ParamMode::Swr);
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        assert!(Registry::load_checkpoint(&mut &b"NOTACKPT"[..]).is_err());
        let r = two_task_registry();
        let mut bytes = Vec::new();
        r.save_checkpoint(&mut bytes).unwrap();
        assert!(matches!(Registry::load_checkpoint(&mut &bytes[..bytes.len() - 3]), Err(RegistryError::Checkpoint(_))));
        bytes.push(0);
        assert!(Registry::load_checkpoint(&mut &bytes[..]).is_err());
    }

    proptest! {
        #[test]
        fn checkpoint_round_trip_is_byte_exact(values in proptest::collection::vec(-1e6f64..1e6, 6), alias in any::<bool>(), frozen in any::<bool>()) {
            let mut r = two_task_registry();
            r.register("A.enc", Tensor::new(&[2, 3], values).unwrap(), ParamMode::Pwr, Owner::task("A")).unwrap();
            r.assign_private_encoder("A", &["A.enc".into()]).unwrap();
            if alias {
                r.register_alias("A.enc@read", "A.enc").unwrap();
            }
            if frozen {
                r.freeze();
            }
            let mut bytes = Vec::new();
            r.save_checkpoint(&mut bytes).unwrap();
            let loaded = Registry::load_checkpoint(&mut &bytes[..]).unwrap();
            prop_assert_eq!(&loaded, &r);
            let mut again = Vec::new();
            loaded.save_checkpoint(&mut again).unwrap();
            prop_assert_eq!(again, bytes);
        }
    }
}
