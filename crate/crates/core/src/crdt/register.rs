use super::ReplicaId;

/// Last-writer-wins cell. Entries are totally ordered by
/// `(timestamp, writer, value)`; merge keeps the maximum.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LwwRegister {
    pub value: Vec<u8>,
    pub timestamp: u64,
    pub writer: ReplicaId,
}

impl LwwRegister {
    pub fn new(value: impl Into<Vec<u8>>, timestamp: u64, writer: ReplicaId) -> Self {
        Self { value: value.into(), timestamp, writer }
    }

    fn rank(&self) -> (u64, ReplicaId, &[u8]) {
        (self.timestamp, self.writer, &self.value)
    }

    pub fn supersedes(&self, other: &LwwRegister) -> bool {
        self.rank() > other.rank()
    }

    pub fn merge(&mut self, other: &LwwRegister) -> bool {
        if other.supersedes(self) {
            *self = other.clone();
            true
        } else {
            false
        }
    }
}
