use std::io::{BufRead, Write};

use super::wire::{decode, encode, Envelope, Message, PROTOCOL_VERSION};
use crate::error::{Error, Result};
use crate::target::MeasurementTarget;

fn send<W: Write>(out: &mut W, id: u64, message: Message) -> Result<()> {
    out.write_all(encode(&Envelope { id, message }).as_bytes())?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

fn answer(target: &mut dyn MeasurementTarget, message: Message) -> Result<Message> {
    match message {
        Message::DecodeRequest { tokens, noise } => {
            let caps = target.capabilities();
            if noise.is_some_and(|n| n.sigma2 != 0.0) && !caps.supports_noise {
                return Err(Error::Config(format!("target `{}` does not take noise", caps.name)));
            }
            Ok(Message::DecodeResponse {
                tokens: target.decode(&tokens, noise)?,
            })
        }
        Message::AttributeRequest { tokens, span } => Ok(Message::AttributeResponse(target.attribute(&tokens, span)?)),
        Message::Hello { .. } => Err(Error::Protocol("hello after handshake".into())),
        other => Err(Error::Protocol(format!("`{}` is not a request", other.kind()))),
    }
}

/// Serves `target` until `input` closes. The first line must be a hello
/// of the current protocol version; after that every request gets exactly
/// one reply carrying its id. A request whose id does not exceed every
/// earlier id is refused with a `Protocol` error frame.
pub fn serve<R: BufRead, W: Write>(target: &mut dyn MeasurementTarget, input: R, mut output: W) -> Result<()> {
    let mut lines = input.lines();
    let first = loop {
        match lines.next() {
            None => return Ok(()),
            Some(line) => {
                let line = line?;
                if !line.trim().is_empty() {
                    break line;
                }
            }
        }
    };
    let hello = decode(&first);
    let (id, version) = match &hello {
        Ok(Envelope {
            id,
            message: Message::Hello { protocol_version },
        }) => (*id, protocol_version.as_str()),
        Ok(env) => (env.id, ""),
        Err(_) => (0, ""),
    };
    if version != PROTOCOL_VERSION {
        let err = Error::Version(format!("expected hello with protocol_version {PROTOCOL_VERSION}"));
        send(&mut output, id, Message::from_error(&err))?;
        return Err(err);
    }
    send(
        &mut output,
        id,
        Message::Capabilities {
            protocol_version: PROTOCOL_VERSION.into(),
            capabilities: target.capabilities().clone(),
        },
    )?;

    let mut last_id = id;
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let env = match decode(&line) {
            Ok(env) => env,
            Err(e) => {
                send(&mut output, 0, Message::from_error(&e))?;
                continue;
            }
        };
        if env.id <= last_id {
            let e = Error::Protocol(format!("request id {} is not above {last_id}", env.id));
            send(&mut output, env.id, Message::from_error(&e))?;
            continue;
        }
        last_id = env.id;
        let reply = answer(target, env.message).unwrap_or_else(|e| Message::from_error(&e));
        send(&mut output, env.id, reply)?;
    }
    Ok(())
}
