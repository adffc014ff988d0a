use std::io::{BufRead, BufReader, Read, Write};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use super::wire::{decode, encode, Envelope, Message, PROTOCOL_VERSION};
use crate::attribution::{AttributionVector, SpanTag};
use crate::error::{Error, Result};
use crate::target::{MeasurementTarget, NoiseRequest, TargetAttribution, TargetCapabilities};

pub const DEFAULT_HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(10);

/// Relative tolerance for label + rationale = total on remote rows.
pub const IDENTITY_TOLERANCE: f64 = 1e-3;

/// One protocol session. Requests strictly alternate with responses.
pub struct Client {
    lines: Receiver<std::io::Result<String>>,
    writer: Box<dyn Write + Send>,
    next_id: u64,
    child: Option<Child>,
}

impl Client {
    /// Session over an arbitrary byte stream pair. Lines are read on a
    /// background thread so that reads can time out.
    pub fn new<R, W>(reader: R, writer: W) -> Self
    where
        R: Read + Send + 'static,
        W: Write + Send + 'static,
    {
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(reader).lines() {
                let stop = line.is_err();
                if tx.send(line).is_err() || stop {
                    break;
                }
            }
        });
        Client {
            lines: rx,
            writer: Box::new(writer),
            next_id: 1,
            child: None,
        }
    }

    /// Launches `command` (program and arguments separated by whitespace)
    /// and talks to it over its standard input and output.
    pub fn spawn(command: &str) -> Result<Self> {
        let mut parts = command.split_whitespace();
        let program = parts
            .next()
            .ok_or_else(|| Error::Config("empty target command".into()))?;
        let mut child = Command::new(program)
            .args(parts)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdout = child.stdout.take().expect("stdout is piped");
        let stdin = child.stdin.take().expect("stdin is piped");
        let mut client = Client::new(stdout, stdin);
        client.child = Some(child);
        Ok(client)
    }

    fn read_line(&mut self, timeout: Option<Duration>) -> Result<String> {
        let got = match timeout {
            Some(t) => self.lines.recv_timeout(t).map_err(|e| match e {
                RecvTimeoutError::Timeout => Error::ProtocolTimeout(t),
                RecvTimeoutError::Disconnected => Error::Protocol("connection closed".into()),
            })?,
            None => self
                .lines
                .recv()
                .map_err(|_| Error::Protocol("connection closed".into()))?,
        };
        Ok(got?)
    }

    fn send(&mut self, env: &Envelope) -> Result<()> {
        let line = encode(env);
        self.writer.write_all(line.as_bytes())?;
        self.writer.write_all(b"\n")?;
        self.writer.flush()?;
        Ok(())
    }

    /// Exchanges hello for the remote's capabilities. Must be the first
    /// call on a session.
    pub fn handshake(&mut self, timeout: Duration) -> Result<TargetCapabilities> {
        let id = self.next_id;
        self.next_id += 1;
        self.send(&Envelope {
            id,
            message: Message::Hello {
                protocol_version: PROTOCOL_VERSION.into(),
            },
        })?;
        let line = self.read_line(Some(timeout))?;
        let env = decode(&line).map_err(|e| Error::Version(format!("unreadable handshake reply: {e}")))?;
        match env.message {
            Message::Capabilities {
                protocol_version,
                capabilities,
            } => {
                if protocol_version != PROTOCOL_VERSION {
                    return Err(Error::Version(format!(
                        "remote speaks protocol {protocol_version}, expected {PROTOCOL_VERSION}"
                    )));
                }
                if env.id != id {
                    return Err(Error::Protocol(format!("handshake answered with id {} instead of {id}", env.id)));
                }
                capabilities.validate()?;
                Ok(capabilities)
            }
            Message::Error { code, message } if code == "Version" => Err(Error::Version(message)),
            Message::Error { code, message } => Err(Error::Remote { code, message }),
            other => Err(Error::Version(format!("expected capabilities, got {}", other.kind()))),
        }
    }

    /// Sends `message` under an explicit id and waits for the reply. Error
    /// frames come back as [`Error::Remote`].
    pub fn request_with_id(&mut self, id: u64, message: Message) -> Result<Message> {
        self.send(&Envelope { id, message })?;
        let line = self.read_line(None)?;
        let env = decode(&line)?;
        if env.id != id {
            return Err(Error::Protocol(format!("response id {} does not match request {id}", env.id)));
        }
        match env.message {
            Message::Error { code, message } => Err(Error::Remote { code, message }),
            m => Ok(m),
        }
    }

    /// Sends `message` under the next id.
    pub fn request(&mut self, message: Message) -> Result<Message> {
        let id = self.next_id;
        self.next_id += 1;
        self.request_with_id(id, message)
    }

    /// Id the next [`Client::request`] will use.
    pub fn next_id(&self) -> u64 {
        self.next_id
    }
}

impl Drop for Client {
    fn drop(&mut self) {
        if let Some(child) = &mut self.child {
            // closing stdin is the shutdown signal
            self.writer = Box::new(std::io::sink());
            let deadline = Instant::now() + Duration::from_secs(2);
            loop {
                match child.try_wait() {
                    Ok(Some(_)) | Err(_) => return,
                    Ok(None) if Instant::now() >= deadline => {
                        let _ = child.kill();
                        let _ = child.wait();
                        return;
                    }
                    Ok(None) => thread::sleep(Duration::from_millis(10)),
                }
            }
        }
    }
}

/// A model on the far side of a protocol session.
pub struct RemoteTarget {
    client: Client,
    caps: TargetCapabilities,
}

impl RemoteTarget {
    pub fn connect(mut client: Client, timeout: Duration) -> Result<Self> {
        let caps = client.handshake(timeout)?;
        Ok(RemoteTarget { client, caps })
    }

    pub fn spawn(command: &str, timeout: Duration) -> Result<Self> {
        RemoteTarget::connect(Client::spawn(command)?, timeout)
    }

    pub fn client_mut(&mut self) -> &mut Client {
        &mut self.client
    }

    /// The attribution vector for one span, after the identity check.
    pub fn attribute_span(&mut self, input: &[String], span: SpanTag) -> Result<AttributionVector> {
        let a = self.attribute(input, span)?;
        Ok(a.spans().get(span).clone())
    }
}

/// Checks lengths and the decomposition identity of a remote response.
pub fn verify_attribution(a: &TargetAttribution, input_len: usize) -> Result<()> {
    for (name, v) in [("label", &a.label), ("rationale", &a.rationale), ("total", &a.total)] {
        if v.len() != input_len {
            return Err(Error::Shape(format!(
                "{name} attribution has {} entries for {input_len} input tokens",
                v.len()
            )));
        }
    }
    a.spans().check_identity(IDENTITY_TOLERANCE)
}

impl MeasurementTarget for RemoteTarget {
    fn capabilities(&self) -> &TargetCapabilities {
        &self.caps
    }

    fn decode(&mut self, input: &[String], noise: Option<NoiseRequest>) -> Result<Vec<String>> {
        if !self.caps.supports_decode {
            return Err(Error::Config(format!("target `{}` cannot decode", self.caps.name)));
        }
        if noise.is_some_and(|n| n.sigma2 != 0.0) && !self.caps.supports_noise {
            return Err(Error::Config(format!("target `{}` does not take noise", self.caps.name)));
        }
        match self.client.request(Message::DecodeRequest {
            tokens: input.to_vec(),
            noise,
        })? {
            Message::DecodeResponse { tokens } => Ok(tokens),
            other => Err(Error::Protocol(format!("expected decode_response, got {}", other.kind()))),
        }
    }

    fn attribute(&mut self, input: &[String], span: SpanTag) -> Result<TargetAttribution> {
        if !self.caps.supports_gradients {
            return Err(Error::Config(format!("target `{}` does not provide gradients", self.caps.name)));
        }
        match self.client.request(Message::AttributeRequest {
            tokens: input.to_vec(),
            span,
        })? {
            Message::AttributeResponse(a) => {
                verify_attribution(&a, input.len())?;
                Ok(a)
            }
            other => Err(Error::Protocol(format!("expected attribute_response, got {}", other.kind()))),
        }
    }
}
