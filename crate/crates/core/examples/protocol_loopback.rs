//! Measure a model through the line protocol instead of in-process.
//!
//! Serves a checkpoint from a thread over an in-memory pipe pair and runs
//! attribution through the client. Against a separate process, use
//! `RemoteTarget::spawn("rassoc serve --checkpoint model.ckpt", timeout)`.

use std::io::{BufReader, Read, Write};
use std::sync::mpsc;

use rationale_assoc::attribution::SpanTag;
use rationale_assoc::format::{format_input, Mode, TaskFormat};
use rationale_assoc::harness::{train_configs, SuiteConfig};
use rationale_assoc::protocol::{serve, Client, RemoteTarget, DEFAULT_HANDSHAKE_TIMEOUT};
use rationale_assoc::target::{LocalTarget, MeasurementTarget};
use rationale_assoc::taskgen::{generate_dataset, SufficiencyConfig};

/// Byte pipe over a channel.
struct Rx(mpsc::Receiver<Vec<u8>>, Vec<u8>);
struct Tx(mpsc::Sender<Vec<u8>>);

impl Read for Rx {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        if self.1.is_empty() {
            match self.0.recv() {
                Ok(chunk) => self.1 = chunk,
                Err(_) => return Ok(0),
            }
        }
        let n = buf.len().min(self.1.len());
        buf[..n].copy_from_slice(&self.1[..n]);
        self.1.drain(..n);
        Ok(n)
    }
}

impl Write for Tx {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.send(buf.to_vec()).map_err(|_| std::io::ErrorKind::BrokenPipe)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

fn pipe() -> (Tx, Rx) {
    let (tx, rx) = mpsc::channel();
    (Tx(tx), Rx(rx, Vec::new()))
}

fn main() -> rationale_assoc::Result<()> {
    let data = generate_dataset(&SufficiencyConfig { s: 0.5, seed: 13, n: 300 })?;
    let suite = train_configs(&data, &SuiteConfig::default(), &[Mode::InputToLabelRationale])?;
    let model = suite.model(Mode::InputToLabelRationale)?.clone();

    let (to_server, server_in) = pipe();
    let (server_out, from_server) = pipe();
    let served = model.clone();
    let server = std::thread::spawn(move || {
        let mut target = LocalTarget::new(served);
        serve(&mut target, BufReader::new(server_in), server_out)
    });

    let mut remote = RemoteTarget::connect(Client::new(BufReader::new(from_server), to_server), DEFAULT_HANDSHAKE_TIMEOUT)?;
    println!("remote: {:?}", remote.capabilities());
    let mut local = LocalTarget::new(model);
    for inst in suite.dev.iter().take(5) {
        let input = format_input(inst, TaskFormat::Qa)?;
        let a = remote.attribute(&input, SpanTag::Total)?;
        let b = local.attribute(&input, SpanTag::Total)?;
        println!("{}: {} -> identical over the wire: {}", inst.id, a.decoded.join(" "), a == b);
    }
    drop(remote);
    server.join().expect("server thread")?;
    Ok(())
}
