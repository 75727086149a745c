//! Point-to-point messaging between ranks.
//!
//! The wire format is a 20-byte little-endian header followed by the payload
//! as little-endian `f64`s:
//!
//! | bytes | field                          |
//! |-------|--------------------------------|
//! | 0..4  | magic `0x53464847`             |
//! | 4..8  | outer step                     |
//! | 8     | phase (0 = x, 1 = y, 2 = z)    |
//! | 9     | sender's face (0 = low, 1 = high) |
//! | 10..12| halo depth                     |
//! | 12..20| payload length in bytes        |
//!
//! [`spawn_world`] runs every rank on its own thread in this process and
//! connects them with channels carrying encoded frames.

use std::io::{self, Read, Write};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::time::Duration;

use thiserror::Error;

pub const MAGIC: u32 = 0x5346_4847;
pub const HEADER_LEN: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("bad magic {0:#010x}")]
    BadMagic(u32),
    #[error("frame of {got} bytes is too short, need {need}")]
    Truncated { got: usize, need: usize },
    #[error("payload length {0} is not a multiple of 8")]
    Misaligned(u64),
    #[error("protocol error from rank {peer}: expected {expected:?}, got {got:?}")]
    Unexpected { peer: usize, expected: Expect, got: Header },
    #[error("rank {0} is not a valid peer")]
    NoSuchPeer(usize),
    #[error("rank {0} shut down")]
    PeerGone(usize),
    #[error("timed out waiting for rank {0}")]
    Timeout(usize),
    #[error("i/o: {0}")]
    Io(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub sweep: u32,
    pub phase: u8,
    pub side: u8,
    pub depth: u16,
    pub payload_len: u64,
}

/// Header fields a receiver insists on; `None` accepts anything.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Expect {
    pub sweep: Option<u32>,
    pub phase: Option<u8>,
    pub side: Option<u8>,
    pub depth: Option<u16>,
    pub values: Option<usize>,
}

impl Expect {
    pub fn matches(&self, h: &Header) -> bool {
        self.sweep.is_none_or(|v| v == h.sweep)
            && self.phase.is_none_or(|v| v == h.phase)
            && self.side.is_none_or(|v| v == h.side)
            && self.depth.is_none_or(|v| v == h.depth)
            && self.values.is_none_or(|v| (v as u64) * 8 == h.payload_len)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Message {
    pub header: Header,
    pub payload: Vec<f64>,
}

impl Message {
    pub fn new(sweep: u32, phase: u8, side: u8, depth: u16, payload: Vec<f64>) -> Self {
        Self {
            header: Header {
                sweep,
                phase,
                side,
                depth,
                payload_len: 8 * payload.len() as u64,
            },
            payload,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.payload.len());
        out.extend_from_slice(&MAGIC.to_le_bytes());
        out.extend_from_slice(&h.sweep.to_le_bytes());
        out.push(h.phase);
        out.push(h.side);
        out.extend_from_slice(&h.depth.to_le_bytes());
        out.extend_from_slice(&h.payload_len.to_le_bytes());
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode_header(bytes: &[u8]) -> Result<Header, TransportError> {
        if bytes.len() < HEADER_LEN {
            return Err(TransportError::Truncated {
                got: bytes.len(),
                need: HEADER_LEN,
            });
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let magic = u32_at(0);
        if magic != MAGIC {
            return Err(TransportError::BadMagic(magic));
        }
        let payload_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        if payload_len % 8 != 0 {
            return Err(TransportError::Misaligned(payload_len));
        }
        Ok(Header {
            sweep: u32_at(4),
            phase: bytes[8],
            side: bytes[9],
            depth: u16::from_le_bytes([bytes[10], bytes[11]]),
            payload_len,
        })
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, TransportError> {
        let header = Self::decode_header(bytes)?;
        let need = HEADER_LEN as u64 + header.payload_len;
        if (bytes.len() as u64) != need {
            return Err(TransportError::Truncated {
                got: bytes.len(),
                need: need as usize,
            });
        }
        let payload = bytes[HEADER_LEN..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { header, payload })
    }

    /// Writes one frame to a byte stream.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), TransportError> {
        w.write_all(&self.encode()).map_err(io_err)
    }

    /// Reads one frame from a byte stream.
    pub fn read_from<R: Read>(mut r: R) -> Result<Self, TransportError> {
        let mut head = [0u8; HEADER_LEN];
        r.read_exact(&mut head).map_err(io_err)?;
        let header = Self::decode_header(&head)?;
        let mut frame = head.to_vec();
        frame.resize(HEADER_LEN + header.payload_len as usize, 0);
        r.read_exact(&mut frame[HEADER_LEN..]).map_err(io_err)?;
        Self::decode(&frame)
    }
}

fn io_err(e: io::Error) -> TransportError {
    TransportError::Io(e.to_string())
}

/// One rank's connections to every other rank.
pub struct Endpoint {
    rank: usize,
    outgoing: Vec<Option<Sender<Vec<u8>>>>,
    incoming: Vec<Option<Receiver<Vec<u8>>>>,
    timeout: Duration,
}

impl Endpoint {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn ranks(&self) -> usize {
        self.outgoing.len()
    }

    pub fn set_timeout(&mut self, timeout: Duration) {
        self.timeout = timeout;
    }

    pub fn send(&self, peer: usize, msg: &Message) -> Result<(), TransportError> {
        let tx = self
            .outgoing
            .get(peer)
            .and_then(Option::as_ref)
            .ok_or(TransportError::NoSuchPeer(peer))?;
        tx.send(msg.encode()).map_err(|_| TransportError::PeerGone(peer))
    }

    /// Blocks for the next frame from `peer` and checks it against `expect`.
    pub fn recv(&self, peer: usize, expect: &Expect) -> Result<Vec<f64>, TransportError> {
        let rx = self
            .incoming
            .get(peer)
            .and_then(Option::as_ref)
            .ok_or(TransportError::NoSuchPeer(peer))?;
        let frame = rx.recv_timeout(self.timeout).map_err(|e| match e {
            RecvTimeoutError::Timeout => TransportError::Timeout(peer),
            RecvTimeoutError::Disconnected => TransportError::PeerGone(peer),
        })?;
        let msg = Message::decode(&frame)?;
        if !expect.matches(&msg.header) {
            return Err(TransportError::Unexpected {
                peer,
                expected: *expect,
                got: msg.header,
            });
        }
        Ok(msg.payload)
    }
}

/// Fully connected in-process endpoints, one per rank.
pub fn loopback(ranks: usize) -> Vec<Endpoint> {
    let mut outgoing: Vec<Vec<Option<Sender<Vec<u8>>>>> = (0..ranks).map(|_| (0..ranks).map(|_| None).collect()).collect();
    let mut incoming: Vec<Vec<Option<Receiver<Vec<u8>>>>> = (0..ranks).map(|_| (0..ranks).map(|_| None).collect()).collect();
    for from in 0..ranks {
        for to in 0..ranks {
            if from != to {
                let (tx, rx) = mpsc::channel();
                outgoing[from][to] = Some(tx);
                incoming[to][from] = Some(rx);
            }
        }
    }
    outgoing
        .into_iter()
        .zip(incoming)
        .enumerate()
        .map(|(rank, (outgoing, incoming))| Endpoint {
            rank,
            outgoing,
            incoming,
            timeout: Duration::from_secs(120),
        })
        .collect()
}

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("a world needs at least one rank")]
    Empty,
    #[error("rank {rank} failed: {message}")]
    RankFailed { rank: usize, message: String },
    #[error("rank {rank} panicked: {message}")]
    RankPanicked { rank: usize, message: String },
}

/// Runs `program` once per rank, concurrently, and collects the results in
/// rank order. When any rank fails its endpoints close, so peers blocked on it
/// fail too instead of hanging. The reported error is the first failure that
/// is not just a consequence of another rank going away.
pub fn spawn_world<T, E, F>(ranks: usize, program: F) -> Result<Vec<T>, WorldError>
where
    T: Send,
    E: std::fmt::Display + Send,
    F: Fn(Endpoint) -> Result<T, E> + Sync,
{
    if ranks == 0 {
        return Err(WorldError::Empty);
    }
    let results: Vec<Result<T, (WorldError, bool)>> = std::thread::scope(|s| {
        let handles: Vec<_> = loopback(ranks)
            .into_iter()
            .map(|ep| {
                let program = &program;
                s.spawn(move || program(ep))
            })
            .collect();
        handles
            .into_iter()
            .enumerate()
            .map(|(rank, h)| match h.join() {
                Ok(Ok(v)) => Ok(v),
                Ok(Err(e)) => {
                    let message = e.to_string();
                    // Errors caused by another rank disappearing are echoes.
                    let secondary = message.contains("shut down");
                    Err((WorldError::RankFailed { rank, message }, secondary))
                }
                Err(p) => {
                    let message = p
                        .downcast_ref::<&str>()
                        .map(|s| s.to_string())
                        .or_else(|| p.downcast_ref::<String>().cloned())
                        .unwrap_or_else(|| "unknown panic".into());
                    Err((WorldError::RankPanicked { rank, message }, false))
                }
            })
            .collect()
    });
    let mut out = Vec::with_capacity(ranks);
    let mut first: Option<(WorldError, bool)> = None;
    for r in results {
        match r {
            Ok(v) => out.push(v),
            Err((e, secondary)) => {
                let replace = match &first {
                    None => true,
                    Some((_, prev_secondary)) => *prev_secondary && !secondary,
                };
                if replace {
                    first = Some((e, secondary));
                }
            }
        }
    }
    match first {
        Some((e, _)) => Err(e),
        None => Ok(out),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slab(n: usize) -> Vec<f64> {
        (0..n).map(|i| (i as f64).sqrt() * 1e-3 + i as f64).collect()
    }

    #[test]
    fn header_layout() {
        let m = Message::new(7, 2, 1, 16, vec![1.0]);
        let b = m.encode();
        assert_eq!(b.len(), 28);
        assert_eq!(&b[0..4], &[0x47, 0x48, 0x46, 0x53]);
        assert_eq!(&b[4..8], &[7, 0, 0, 0]);
        assert_eq!((b[8], b[9]), (2, 1));
        assert_eq!(&b[10..12], &[16, 0]);
        assert_eq!(&b[12..20], &[8, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(Message::decode(&b).unwrap(), m);
    }

    #[test]
    fn decode_rejects_garbage() {
        let mut b = Message::new(0, 0, 0, 1, vec![1.0, 2.0]).encode();
        assert!(matches!(Message::decode(&b[..10]), Err(TransportError::Truncated { .. })));
        assert!(matches!(Message::decode(&b[..27]), Err(TransportError::Truncated { .. })));
        b[0] = 0;
        assert!(matches!(Message::decode(&b), Err(TransportError::BadMagic(_))));
    }

    #[test]
    fn stream_framing_round_trip() {
        let a = Message::new(1, 0, 0, 3, slab(5));
        let b = Message::new(2, 1, 1, 3, slab(2));
        let mut buf = Vec::new();
        a.write_to(&mut buf).unwrap();
        b.write_to(&mut buf).unwrap();
        let mut r = &buf[..];
        assert_eq!(Message::read_from(&mut r).unwrap(), a);
        assert_eq!(Message::read_from(&mut r).unwrap(), b);
    }

    #[test]
    fn loopback_round_trip_is_bitwise() {
        let eps = loopback(2);
        let payload = slab(16);
        eps[0].send(1, &Message::new(0, 0, 1, 1, payload.clone())).unwrap();
        let got = eps[1].recv(0, &Expect::default()).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&got), bits(&payload));
    }

    #[test]
    fn mismatched_phase_is_protocol_error() {
        let eps = loopback(2);
        eps[0].send(1, &Message::new(0, 1, 1, 1, slab(4))).unwrap();
        let expect = Expect {
            phase: Some(0),
            ..Expect::default()
        };
        assert!(matches!(eps[1].recv(0, &expect), Err(TransportError::Unexpected { .. })));
    }

    #[test]
    fn in_order_delivery() {
        let eps = loopback(2);
        eps[1].send(0, &Message::new(0, 0, 0, 1, vec![1.0])).unwrap();
        eps[1].send(0, &Message::new(1, 0, 0, 1, vec![2.0])).unwrap();
        assert_eq!(eps[0].recv(1, &Expect::default()).unwrap(), vec![1.0]);
        assert_eq!(eps[0].recv(1, &Expect::default()).unwrap(), vec![2.0]);
    }

    #[test]
    fn self_and_unknown_peers_rejected() {
        let eps = loopback(2);
        assert_eq!(
            eps[0].send(0, &Message::new(0, 0, 0, 1, vec![])),
            Err(TransportError::NoSuchPeer(0))
        );
        assert_eq!(eps[0].recv(5, &Expect::default()), Err(TransportError::NoSuchPeer(5)));
    }

    #[test]
    fn single_rank_echo() {
        let out = spawn_world(1, |ep| Ok::<_, TransportError>(ep.rank() + 41)).unwrap();
        assert_eq!(out, vec![41]);
    }

    #[test]
    fn ping_pong() {
        let out = spawn_world(2, |ep| {
            let peer = 1 - ep.rank();
            let mut last = 0.0;
            for i in 0..1000u32 {
                if ep.rank() == 0 {
                    ep.send(peer, &Message::new(i, 0, 0, 1, vec![i as f64]))?;
                    last = ep.recv(
                        peer,
                        &Expect {
                            sweep: Some(i),
                            ..Expect::default()
                        },
                    )?[0];
                } else {
                    let v = ep.recv(
                        peer,
                        &Expect {
                            sweep: Some(i),
                            ..Expect::default()
                        },
                    )?;
                    ep.send(peer, &Message::new(i, 0, 1, 1, vec![v[0] + 1.0]))?;
                }
            }
            Ok::<_, TransportError>(last)
        })
        .unwrap();
        assert_eq!(out[0], 1000.0);
    }

    #[test]
    fn failures_are_reported_by_rank() {
        let err = spawn_world(3, |ep| {
            if ep.rank() == 2 {
                return Err(TransportError::Io("disk on fire".into()));
            }
            ep.recv(2, &Expect::default()).map(|_| ())
        })
        .unwrap_err();
        assert!(matches!(err, WorldError::RankFailed { rank: 2, .. }), "{err}");

        let err = spawn_world(2, |ep| {
            if ep.rank() == 1 {
                panic!("boom");
            }
            Ok::<_, TransportError>(())
        })
        .unwrap_err();
        assert!(matches!(err, WorldError::RankPanicked { rank: 1, .. }));
    }
}
