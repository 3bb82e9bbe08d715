//! Line-oriented JSON event log.

use std::io::Write;
use std::sync::{Arc, Mutex};

use serde_json::{Map, Value};

/// Cloneable handle writing one JSON object per line to every sink. Events
/// carry a `seq` number and the event name; no timestamps, so logs of
/// identical runs are identical.
#[derive(Clone, Default)]
pub struct EventLog {
    inner: Arc<Mutex<Inner>>,
}

#[derive(Default)]
struct Inner {
    sinks: Vec<Box<dyn Write + Send>>,
    seq: u64,
}

impl EventLog {
    /// A log that discards everything.
    pub fn null() -> Self {
        Self::default()
    }

    pub fn to_writer(w: impl Write + Send + 'static) -> Self {
        let log = Self::default();
        log.add_sink(w);
        log
    }

    pub fn add_sink(&self, w: impl Write + Send + 'static) {
        self.inner.lock().expect("event log poisoned").sinks.push(Box::new(w));
    }

    pub fn emit(&self, event: &str, fields: Value) {
        let mut inner = self.inner.lock().expect("event log poisoned");
        if inner.sinks.is_empty() {
            return;
        }
        inner.seq += 1;
        let mut obj = Map::new();
        obj.insert("seq".into(), Value::from(inner.seq));
        obj.insert("event".into(), Value::from(event));
        if let Value::Object(extra) = fields {
            obj.extend(extra);
        }
        let line = Value::Object(obj).to_string();
        for sink in &mut inner.sinks {
            // A failing sink must not abort training.
            let _ = writeln!(sink, "{line}").and_then(|_| sink.flush());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[derive(Clone, Default)]
    struct Shared(Arc<Mutex<Vec<u8>>>);

    impl Write for Shared {
        fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
            self.0.lock().unwrap().extend_from_slice(buf);
            Ok(buf.len())
        }
        fn flush(&mut self) -> std::io::Result<()> {
            Ok(())
        }
    }

    #[test]
    fn one_object_per_line() {
        let buf = Shared::default();
        let log = EventLog::to_writer(buf.clone());
        log.emit("a", json!({"x": 1}));
        log.clone().emit("b", json!({}));
        let text = String::from_utf8(buf.0.lock().unwrap().clone()).unwrap();
        let lines: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0]["event"], "a");
        assert_eq!(lines[0]["x"], 1);
        assert_eq!(lines[1]["seq"], 2);
    }
}
