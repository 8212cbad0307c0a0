use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    /// Network or service fault; worth one retry.
    #[error("transport failure: {0}")]
    Transport(String),
    /// The backend answered but refused or returned something unusable.
    #[error("backend rejected the request: {0}")]
    Rejected(String),
}

impl BackendError {
    pub fn is_transient(&self) -> bool {
        matches!(self, BackendError::Transport(_))
    }
}

/// A chat model. `send` receives the whole conversation so far and returns
/// the next assistant message.
pub trait Backend: Send + Sync {
    fn id(&self) -> &str;
    fn deterministic(&self) -> bool;
    fn send(&self, messages: &[ChatMessage]) -> Result<String, BackendError>;
}

impl<B: Backend + ?Sized> Backend for &B {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn deterministic(&self) -> bool {
        (**self).deterministic()
    }
    fn send(&self, messages: &[ChatMessage]) -> Result<String, BackendError> {
        (**self).send(messages)
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn deterministic(&self) -> bool {
        (**self).deterministic()
    }
    fn send(&self, messages: &[ChatMessage]) -> Result<String, BackendError> {
        (**self).send(messages)
    }
}

/// One conversation. Messages go out strictly in order; a failed exchange
/// leaves the history untouched so it can be retried.
pub struct Session<'a> {
    backend: &'a dyn Backend,
    history: Vec<ChatMessage>,
}

impl<'a> Session<'a> {
    pub fn open(backend: &'a dyn Backend, instructions: &str) -> Self {
        Session {
            backend,
            history: vec![ChatMessage::system(instructions)],
        }
    }

    pub fn exchange(&mut self, content: &str) -> Result<String, BackendError> {
        self.history.push(ChatMessage::user(content));
        match self.backend.send(&self.history) {
            Ok(reply) => {
                self.history.push(ChatMessage::assistant(reply.clone()));
                Ok(reply)
            }
            Err(e) => {
                self.history.pop();
                Err(e)
            }
        }
    }

    pub fn messages(&self) -> &[ChatMessage] {
        &self.history
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    struct Echo {
        seen: Mutex<Vec<usize>>,
        fail_first: Mutex<bool>,
    }

    impl Backend for Echo {
        fn id(&self) -> &str {
            "echo"
        }
        fn deterministic(&self) -> bool {
            true
        }
        fn send(&self, messages: &[ChatMessage]) -> Result<String, BackendError> {
            let mut fail = self.fail_first.lock().unwrap();
            if *fail {
                *fail = false;
                return Err(BackendError::Transport("reset".into()));
            }
            self.seen.lock().unwrap().push(messages.len());
            Ok(messages.last().unwrap().content.to_uppercase())
        }
    }

    #[test]
    fn session_keeps_order_and_recovers() {
        let echo = Echo {
            seen: Mutex::new(Vec::new()),
            fail_first: Mutex::new(true),
        };
        let mut s = Session::open(&echo, "doc");
        assert!(s.exchange("a").unwrap_err().is_transient());
        assert_eq!(s.messages().len(), 1);
        assert_eq!(s.exchange("a").unwrap(), "A");
        assert_eq!(s.exchange("b").unwrap(), "B");
        assert_eq!(*echo.seen.lock().unwrap(), vec![2, 4]);
        let roles: Vec<Role> = s.messages().iter().map(|m| m.role).collect();
        assert_eq!(
            roles,
            [Role::System, Role::User, Role::Assistant, Role::User, Role::Assistant]
        );
    }
}
