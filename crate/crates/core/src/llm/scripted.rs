//! Replays canned replies keyed by (agent role, ordinal).

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Mutex;

use super::{AgentRole, Backend, BackendDescriptor, ChatRequest, Completion, LlmError};

#[derive(Debug)]
pub struct ScriptedBackend {
    descriptor: BackendDescriptor,
    replies: BTreeMap<String, Vec<String>>,
    cursors: Mutex<BTreeMap<String, u32>>,
    transcript: Mutex<Vec<(String, ChatRequest)>>,
}

impl Default for ScriptedBackend {
    fn default() -> Self {
        Self {
            descriptor: BackendDescriptor::scripted(),
            replies: BTreeMap::new(),
            cursors: Mutex::new(BTreeMap::new()),
            transcript: Mutex::new(Vec::new()),
        }
    }
}

impl ScriptedBackend {
    pub fn from_replies<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = (AgentRole, S)>,
        S: Into<String>,
    {
        let mut out = Self::default();
        for (role, text) in replies {
            out.push(role, text);
        }
        out
    }

    pub fn push(&mut self, role: AgentRole, text: impl Into<String>) {
        self.push_key(&role.key(), text);
    }

    pub fn push_key(&mut self, key: &str, text: impl Into<String>) {
        self.replies.entry(key.to_string()).or_default().push(text.into());
    }

    /// Load `<role>.<n>.txt` files, `n` counting from 1 without gaps. Files for
    /// roles the gateway does not know (e.g. scripted user decisions) are skipped.
    pub fn load_dir(dir: &Path) -> Result<Self, LlmError> {
        let read = std::fs::read_dir(dir)
            .map_err(|e| LlmError::BadScript(format!("{}: {e}", dir.display())))?;
        let mut found: BTreeMap<String, BTreeMap<u32, String>> = BTreeMap::new();
        for entry in read {
            let entry = entry.map_err(|e| LlmError::BadScript(e.to_string()))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            let Some(stem) = name.strip_suffix(".txt") else { continue };
            let Some((role, n)) = stem.rsplit_once('.') else { continue };
            let Ok(n) = n.parse::<u32>() else { continue };
            if AgentRole::from_key(role).is_none() {
                continue;
            }
            let text = std::fs::read_to_string(entry.path())
                .map_err(|e| LlmError::BadScript(format!("{name}: {e}")))?;
            found.entry(role.to_string()).or_default().insert(n, text);
        }
        let mut out = Self::default();
        for (role, by_n) in found {
            for (expect, (n, text)) in (1..).zip(by_n) {
                if n != expect {
                    return Err(LlmError::BadScript(format!("{role}: reply {expect} missing")));
                }
                out.push_key(&role, text);
            }
        }
        Ok(out)
    }

    /// Requests received so far, in arrival order.
    pub fn transcript(&self) -> Vec<(String, ChatRequest)> {
        self.transcript.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn remaining(&self, role: AgentRole) -> usize {
        let key = role.key();
        let used = self.cursors.lock().unwrap_or_else(|e| e.into_inner()).get(&key).copied().unwrap_or(0);
        self.replies.get(&key).map(|v| v.len()).unwrap_or(0).saturating_sub(used as usize)
    }
}

impl Backend for ScriptedBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn complete(&self, request: &ChatRequest) -> Result<Completion, LlmError> {
        let key = request.agent_role.key();
        let mut cursors = self.cursors.lock().unwrap_or_else(|e| e.into_inner());
        let cursor = cursors.entry(key.clone()).or_insert(0);
        let reply = self
            .replies
            .get(&key)
            .and_then(|v| v.get(*cursor as usize))
            .ok_or_else(|| LlmError::ScriptExhausted { role: key.clone(), ordinal: *cursor + 1 })?;
        *cursor += 1;
        self.transcript
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .push((key, request.clone()));
        Ok(Completion::text(reply.clone()))
    }

    fn scripted_roles(&self) -> Option<BTreeSet<String>> {
        Some(self.replies.keys().cloned().collect())
    }

    fn cursors(&self) -> BTreeMap<String, u32> {
        self.cursors.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    fn fast_forward(&self, consumed: &BTreeMap<String, u32>) {
        let mut cursors = self.cursors.lock().unwrap_or_else(|e| e.into_inner());
        for (role, n) in consumed {
            let c = cursors.entry(role.clone()).or_insert(0);
            *c = (*c).max(*n);
        }
    }
}
