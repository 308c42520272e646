//! UDP client for the wire protocol.
//!
//! Request/reply with timeout and retry: every call either returns the
//! server's answer or a [`ClientError::Timeout`] within
//! `retries × timeout`. One request is in flight at a time — the handle is
//! internally serialized, so sharing a [`Client`] across threads is safe.

use std::io;
use std::net::{ToSocketAddrs, UdpSocket};
use std::sync::Mutex;
use std::time::Duration;

use thiserror::Error;

use crate::wire::MAX_DATAGRAM;

pub const DEFAULT_TIMEOUT_MS: u64 = 200;
pub const DEFAULT_RETRIES: u32 = 3;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("no reply after retries")]
    Timeout,
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("server error {code}: {reason}")]
    Server { code: u8, reason: String },
    #[error("malformed reply: {0}")]
    Reply(String),
}

pub struct Client {
    sock: Mutex<UdpSocket>,
    timeout: Duration,
    retries: u32,
}

impl Client {
    /// Connect with the default 200 ms timeout and 3 retries.
    pub fn connect<A: ToSocketAddrs>(addr: A) -> Result<Client, ClientError> {
        Client::with_policy(addr, Duration::from_millis(DEFAULT_TIMEOUT_MS), DEFAULT_RETRIES)
    }

    pub fn with_policy<A: ToSocketAddrs>(
        addr: A,
        timeout: Duration,
        retries: u32,
    ) -> Result<Client, ClientError> {
        let sock = UdpSocket::bind(("0.0.0.0", 0))?;
        sock.connect(addr)?;
        sock.set_read_timeout(Some(timeout))?;
        Ok(Client { sock: Mutex::new(sock), timeout, retries })
    }

    /// Send one command line and return the `OK` payload (empty string for a
    /// bare `OK`). `ERR` replies become [`ClientError::Server`].
    fn transact(&self, line: &str) -> Result<String, ClientError> {
        let sock = self.sock.lock().expect("client socket poisoned");
        let frame = format!("{line}\n");
        let mut buf = [0u8; MAX_DATAGRAM];
        // Drop any stale reply a previous timed-out attempt left queued.
        sock.set_nonblocking(true)?;
        while sock.recv(&mut buf).is_ok() {}
        sock.set_nonblocking(false)?;
        sock.set_read_timeout(Some(self.timeout))?;
        for _ in 0..self.retries.max(1) {
            sock.send(frame.as_bytes())?;
            match sock.recv(&mut buf) {
                Ok(n) => {
                    let text = std::str::from_utf8(&buf[..n])
                        .map_err(|_| ClientError::Reply("non-utf8 reply".into()))?;
                    return parse_reply(text.trim_end_matches(['\r', '\n']));
                }
                Err(e)
                    if e.kind() == io::ErrorKind::WouldBlock
                        || e.kind() == io::ErrorKind::TimedOut =>
                {
                    continue;
                }
                Err(e) => return Err(ClientError::Io(e)),
            }
        }
        Err(ClientError::Timeout)
    }

    pub fn ping(&self) -> Result<(), ClientError> {
        let payload = self.transact("PING")?;
        if payload == "PONG" {
            Ok(())
        } else {
            Err(ClientError::Reply(format!("expected PONG, got `{payload}`")))
        }
    }

    pub fn info(&self) -> Result<String, ClientError> {
        self.transact("INFO")
    }

    pub fn set_voltage_mv(&self, ch: u16, mv: i32) -> Result<(), ClientError> {
        self.transact(&format!("SET {ch} {mv}")).map(|_| ())
    }

    pub fn set_switch(&self, ch: u16, closed: bool) -> Result<(), ClientError> {
        self.transact(&format!("SW {ch} {}", closed as u8)).map(|_| ())
    }

    pub fn get_current_pa(&self, ch: u16) -> Result<i64, ClientError> {
        let payload = self.transact(&format!("GETI {ch}"))?;
        payload
            .parse()
            .map_err(|_| ClientError::Reply(format!("GETI payload `{payload}`")))
    }

    pub fn get_voltage_mv(&self, ch: u16) -> Result<i64, ClientError> {
        let payload = self.transact(&format!("GETV {ch}"))?;
        payload
            .parse()
            .map_err(|_| ClientError::Reply(format!("GETV payload `{payload}`")))
    }

    pub fn calibrate(&self, n_samples: u32) -> Result<(), ClientError> {
        self.transact(&format!("CAL {n_samples}")).map(|_| ())
    }

    pub fn run(&self, protocol_name: &str) -> Result<(), ClientError> {
        self.transact(&format!("RUN {protocol_name}")).map(|_| ())
    }

    pub fn stop(&self) -> Result<(), ClientError> {
        self.transact("STOP").map(|_| ())
    }
}

fn parse_reply(line: &str) -> Result<String, ClientError> {
    if line == "OK" {
        return Ok(String::new());
    }
    if let Some(payload) = line.strip_prefix("OK ") {
        return Ok(payload.to_string());
    }
    if let Some(rest) = line.strip_prefix("ERR ") {
        let mut parts = rest.splitn(2, ' ');
        let code = parts
            .next()
            .and_then(|c| c.parse::<u8>().ok())
            .ok_or_else(|| ClientError::Reply(format!("bad error frame `{line}`")))?;
        let reason = parts.next().unwrap_or("").to_string();
        return Err(ClientError::Server { code, reason });
    }
    Err(ClientError::Reply(format!("unrecognized frame `{line}`")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reply_parsing() {
        assert_eq!(parse_reply("OK").unwrap(), "");
        assert_eq!(parse_reply("OK PONG").unwrap(), "PONG");
        assert_eq!(parse_reply("OK 1650000").unwrap(), "1650000");
        match parse_reply("ERR 2 channel") {
            Err(ClientError::Server { code: 2, reason }) => assert_eq!(reason, "channel"),
            other => panic!("expected server error, got {other:?}"),
        }
        assert!(matches!(parse_reply("BOGUS"), Err(ClientError::Reply(_))));
        assert!(matches!(parse_reply("ERR x y"), Err(ClientError::Reply(_))));
    }

    #[test]
    fn unreachable_server_times_out() {
        // Reserve a port by binding, so nothing answers there.
        let dead = UdpSocket::bind(("127.0.0.1", 0)).unwrap();
        let addr = dead.local_addr().unwrap();
        let client =
            Client::with_policy(addr, Duration::from_millis(30), 2).unwrap();
        let t0 = std::time::Instant::now();
        match client.ping() {
            Err(ClientError::Timeout) => {}
            other => panic!("expected timeout, got {other:?}"),
        }
        let elapsed = t0.elapsed();
        assert!(elapsed >= Duration::from_millis(55), "retried {elapsed:?}");
        assert!(elapsed < Duration::from_millis(500), "gave up promptly {elapsed:?}");
    }
}
