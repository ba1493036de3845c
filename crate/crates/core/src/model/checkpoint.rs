use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelError, Result, VectorFieldNet};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Snapshot of a generative model after a task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    /// 1-based task index the snapshot was taken after.
    pub task_index: usize,
    /// Classes introduced by that task.
    pub task_classes: Vec<u32>,
    pub net: VectorFieldNet,
}

impl Checkpoint {
    pub fn new(task_index: usize, task_classes: Vec<u32>, net: VectorFieldNet) -> Self {
        Self { format_version: CHECKPOINT_VERSION, task_index, task_classes, net }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| ModelError::Io(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            format_version: u32,
        }
        let header: Header = serde_json::from_str(text).map_err(|e| ModelError::Io(e.to_string()))?;
        if header.format_version != CHECKPOINT_VERSION {
            return Err(ModelError::Version { found: header.format_version, expected: CHECKPOINT_VERSION });
        }
        serde_json::from_str(text).map_err(|e| ModelError::Io(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NetConfig;
    use crate::rng::{rng_for, Stream};

    #[test]
    fn json_keeps_bits_and_checks_version() {
        let mut rng = rng_for(0, Stream::Init, 0);
        let mut net =
            VectorFieldNet::new(NetConfig { hidden: 4, hidden_layers: 2, ..NetConfig::default() }, &mut rng).unwrap();
        net.add_embedding_class(0, &mut rng).unwrap();
        let ck = Checkpoint::new(1, vec![0], net);
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back, ck);
        let bumped = ck.to_json().unwrap().replacen("\"format_version\":1", "\"format_version\":99", 1);
        assert!(matches!(Checkpoint::from_json(&bumped), Err(ModelError::Version { found: 99, .. })));
    }
}
