use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{
    Adapter, Capabilities, PlatformError, PublishRequest, Submission, TaskHandle, TaskProgress, TaskState,
};
use crate::digest::sha256_hex;
use crate::workflow::ElementKind;

pub const FILE_ADAPTER_ID: &str = "file";

/// Offline adapter: every published task is a directory holding `task.json`
/// (payload and units) and an append-only `judgments.ndjson` that is filled
/// by hand or by an external collector.
pub struct FileAdapter {
    root: PathBuf,
    lock: Mutex<()>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct TaskFile {
    created_at: DateTime<Utc>,
    state: TaskState,
    request: PublishRequest,
}

impl FileAdapter {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            lock: Mutex::new(()),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn task_dir(&self, task_id: &str) -> PathBuf {
        self.root.join(task_id)
    }

    fn task_file(&self, task_id: &str) -> Result<TaskFile, PlatformError> {
        let path = self.task_dir(task_id).join("task.json");
        let text = fs::read_to_string(&path).map_err(|_| PlatformError::UnknownTask(task_id.to_string()))?;
        serde_json::from_str(&text).map_err(|e| PlatformError::Io(e.to_string()))
    }

    fn write_task(&self, task_id: &str, task: &TaskFile) -> Result<(), PlatformError> {
        let dir = self.task_dir(task_id);
        fs::create_dir_all(&dir)?;
        let tmp = dir.join("task.json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(task).map_err(|e| PlatformError::Io(e.to_string()))?)?;
        fs::rename(tmp, dir.join("task.json"))?;
        Ok(())
    }

    fn set_state(&self, handle: &TaskHandle, state: TaskState) -> Result<(), PlatformError> {
        let _g = self.lock.lock().unwrap();
        let mut task = self.task_file(&handle.platform_task_id)?;
        task.state = state;
        self.write_task(&handle.platform_task_id, &task)
    }

    /// Appends one submission line to a task's judgment file.
    pub fn append_submission(&self, task_id: &str, s: &Submission) -> Result<(), PlatformError> {
        let _g = self.lock.lock().unwrap();
        self.task_file(task_id)?;
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.task_dir(task_id).join("judgments.ndjson"))?;
        let mut line = serde_json::to_vec(s).map_err(|e| PlatformError::Io(e.to_string()))?;
        line.push(b'\n');
        f.write_all(&line)?;
        Ok(())
    }

    fn lines(&self, task_id: &str) -> Result<Vec<String>, PlatformError> {
        let path = self.task_dir(task_id).join("judgments.ndjson");
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(e.into()),
        };
        // A trailing line without newline is still being written.
        let complete = match text.rfind('\n') {
            Some(i) => &text[..=i],
            None => "",
        };
        Ok(complete.lines().map(str::to_string).collect())
    }
}

impl Adapter for FileAdapter {
    fn id(&self) -> &str {
        FILE_ADAPTER_ID
    }

    fn capabilities(&self) -> Capabilities {
        let mut caps = Capabilities::all(false);
        caps.elements.remove(&ElementKind::HighlightableImage);
        caps
    }

    fn publish(&self, request: &PublishRequest) -> Result<TaskHandle, PlatformError> {
        let _g = self.lock.lock().unwrap();
        let task_id = format!("t-{}", &sha256_hex(request.idempotency_token.as_bytes())[..16]);
        if let Ok(existing) = self.task_file(&task_id) {
            return Ok(TaskHandle {
                adapter_id: FILE_ADAPTER_ID.to_string(),
                platform_task_id: task_id,
                created_at: existing.created_at,
            });
        }
        let created_at = Utc::now();
        self.write_task(
            &task_id,
            &TaskFile {
                created_at,
                state: TaskState::Active,
                request: request.clone(),
            },
        )?;
        Ok(TaskHandle {
            adapter_id: FILE_ADAPTER_ID.to_string(),
            platform_task_id: task_id,
            created_at,
        })
    }

    fn status(&self, handle: &TaskHandle) -> Result<TaskProgress, PlatformError> {
        let task = self.task_file(&handle.platform_task_id)?;
        Ok(TaskProgress {
            state: task.state,
            submissions: self.lines(&handle.platform_task_id)?.len() as u64,
        })
    }

    fn pause(&self, handle: &TaskHandle) -> Result<(), PlatformError> {
        self.set_state(handle, TaskState::Paused)
    }

    fn resume(&self, handle: &TaskHandle) -> Result<(), PlatformError> {
        self.set_state(handle, TaskState::Active)
    }

    fn fetch_judgments(&self, handle: &TaskHandle, since: u64) -> Result<(Vec<Submission>, u64), PlatformError> {
        let lines = self.lines(&handle.platform_task_id)?;
        let mut out = Vec::new();
        for (i, line) in lines.iter().enumerate().skip(since as usize) {
            match serde_json::from_str::<Submission>(line) {
                Ok(s) => out.push(s),
                Err(e) => tracing::warn!(task = %handle.platform_task_id, line = i + 1, %e, "skipping malformed judgment line"),
            }
        }
        Ok((out, (lines.len() as u64).max(since)))
    }

    fn cancel(&self, handle: &TaskHandle) -> Result<(), PlatformError> {
        self.set_state(handle, TaskState::Cancelled)
    }

    fn worker_country(&self, platform_worker_id: &str) -> Result<Option<String>, PlatformError> {
        let path = self.root.join("workers.json");
        let Ok(text) = fs::read_to_string(path) else {
            return Ok(None);
        };
        let map: BTreeMap<String, String> = serde_json::from_str(&text).map_err(|e| PlatformError::Io(e.to_string()))?;
        Ok(map.get(platform_worker_id).cloned())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::platform::{translate_template, TaskPayload};
    use crate::workflow::{Paging, TaskTemplate, UiElement};

    fn request(token: &str) -> PublishRequest {
        let template = TaskTemplate {
            title: "screen".into(),
            instructions: String::new(),
            elements: vec![UiElement::text("abstract"), UiElement::single_choice(&["in", "out"])],
            paging: Paging {
                units_per_page: 4,
                gold_per_page: 1,
                first_page_all_gold: false,
                max_pages: 3,
            },
        };
        let payload: TaskPayload = translate_template(&template, "file", &Capabilities::all(false), None).unwrap();
        PublishRequest {
            run_id: "r".into(),
            block_id: "b".into(),
            group: None,
            payload,
            units: vec![],
            votes_per_unit: 3,
            reward_per_assignment: 10,
            idempotency_token: token.into(),
        }
    }

    fn sub(unit: &str) -> Submission {
        Submission {
            unit_id: unit.into(),
            worker_id: "w1".into(),
            fingerprint: "fp".into(),
            answer: "in".into(),
            decision_time_ms: 1500,
            timestamp: Utc::now(),
            country: None,
            session: None,
        }
    }

    #[test]
    fn publish_is_idempotent_and_cursor_monotone() {
        let dir = tempfile::tempdir().unwrap();
        let a = FileAdapter::new(dir.path());
        let h1 = a.publish(&request("tok")).unwrap();
        let h2 = a.publish(&request("tok")).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
        for u in ["u1", "u2", "u3"] {
            a.append_submission(&h1.platform_task_id, &sub(u)).unwrap();
        }
        let (all, c) = a.fetch_judgments(&h1, 0).unwrap();
        assert_eq!((all.len(), c), (3, 3));
        let (tail, c2) = a.fetch_judgments(&h1, 1).unwrap();
        assert_eq!(tail, all[1..].to_vec());
        assert_eq!(c2, 3);
        let (none, c3) = a.fetch_judgments(&h1, 3).unwrap();
        assert!(none.is_empty());
        assert_eq!(c3, 3);
    }

    #[test]
    fn partial_line_is_not_delivered() {
        let dir = tempfile::tempdir().unwrap();
        let a = FileAdapter::new(dir.path());
        let h = a.publish(&request("tok")).unwrap();
        a.append_submission(&h.platform_task_id, &sub("u1")).unwrap();
        let mut f = OpenOptions::new()
            .append(true)
            .open(a.task_dir(&h.platform_task_id).join("judgments.ndjson"))
            .unwrap();
        f.write_all(b"{\"unitId\":\"u2\"").unwrap();
        let (got, c) = a.fetch_judgments(&h, 0).unwrap();
        assert_eq!((got.len(), c), (1, 1));
    }

    #[test]
    fn pause_resume_cancel() {
        let dir = tempfile::tempdir().unwrap();
        let a = FileAdapter::new(dir.path());
        let h = a.publish(&request("tok")).unwrap();
        a.pause(&h).unwrap();
        assert_eq!(a.status(&h).unwrap().state, TaskState::Paused);
        a.resume(&h).unwrap();
        assert_eq!(a.status(&h).unwrap().state, TaskState::Active);
        a.cancel(&h).unwrap();
        assert_eq!(a.status(&h).unwrap().state, TaskState::Cancelled);
    }
}
