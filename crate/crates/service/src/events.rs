//! Append-only, multi-subscriber line log backing the progress streams.

use std::convert::Infallible;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use futures::Stream;
use serde::Serialize;
use tokio::sync::watch;

#[derive(Debug)]
pub struct EventLog {
    lines: Mutex<Vec<String>>,
    /// `(line count, closed)`.
    state: watch::Sender<(usize, bool)>,
}

impl Default for EventLog {
    fn default() -> Self {
        Self {
            lines: Mutex::new(Vec::new()),
            state: watch::Sender::new((0, false)),
        }
    }
}

impl EventLog {
    /// A log that is already complete, for records reloaded from disk.
    pub fn closed() -> Self {
        let log = Self::default();
        log.close();
        log
    }

    pub fn push<T: Serialize>(&self, event: &T) {
        let line = serde_json::to_string(event).expect("events serialise");
        let n = {
            let mut lines = self.lines.lock().unwrap();
            lines.push(line);
            lines.len()
        };
        self.state.send_modify(|s| s.0 = n);
    }

    pub fn close(&self) {
        self.state.send_modify(|s| s.1 = true);
    }

    pub fn lines(&self) -> Vec<String> {
        self.lines.lock().unwrap().clone()
    }

    /// Replays every line so far, then follows new ones until the log closes.
    pub fn subscribe(self: &Arc<Self>) -> impl Stream<Item = Result<Bytes, Infallible>> + Send + 'static {
        let rx = self.state.subscribe();
        futures::stream::unfold((self.clone(), 0usize, rx), |(log, idx, mut rx)| async move {
            loop {
                let (count, closed) = *rx.borrow_and_update();
                if idx < count {
                    let mut line = log.lines.lock().unwrap()[idx].clone();
                    line.push('\n');
                    return Some((Ok(Bytes::from(line)), (log, idx + 1, rx)));
                }
                if closed || rx.changed().await.is_err() {
                    return None;
                }
            }
        })
    }
}
