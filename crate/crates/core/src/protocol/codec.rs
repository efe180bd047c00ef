use std::io::{self, Read};

use crate::model::TradeMatrix;

use super::{CoordinatorBroadcast, Message, TradeProposal};

const TAG_PROPOSAL: u8 = 1;
const TAG_BROADCAST: u8 = 2;
const TAG_JOIN: u8 = 3;

/// Upper bound on a frame body; larger length prefixes are rejected before
/// any allocation.
pub const MAX_FRAME_LEN: usize = 64 << 20;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DecodeErrorKind {
    Truncated { needed: usize },
    LengthMismatch { declared: usize, actual: usize },
    TooLarge(usize),
    UnknownTag(u8),
    InvalidFlag(u8),
    SelfTrade(usize),
    NonFinite,
    TrailingBytes(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("malformed frame at byte {offset}: {kind:?}")]
pub struct DecodeError {
    pub offset: usize,
    pub kind: DecodeErrorKind,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u64).to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn rows_shape(m: &TradeMatrix<f64>) -> (usize, usize) {
    (m.rows.len(), m.rows.first().map_or(0, Vec::len))
}

/// Serializes `msg` into one length-prefixed frame.
///
/// # Panics
/// If a broadcast's aux and dual rows use different counterparties or if trade
/// rows are ragged; both are programming errors on the sending side.
pub fn encode_frame(msg: &Message) -> Vec<u8> {
    let mut body = Vec::new();
    match msg {
        Message::Proposal(p) => {
            body.push(TAG_PROPOSAL);
            put_u32(&mut body, p.user_id);
            put_u64(&mut body, p.iteration);
            let (rows, h) = rows_shape(&p.trades);
            put_u32(&mut body, rows);
            put_u32(&mut body, h);
            for (c, row) in p.trades.counterparties.iter().zip(&p.trades.rows) {
                assert_eq!(row.len(), h, "ragged trade rows");
                put_u32(&mut body, *c);
                row.iter().for_each(|v| put_f64(&mut body, *v));
            }
        }
        Message::Broadcast(b) => {
            assert_eq!(
                b.aux_row.counterparties, b.dual_row.counterparties,
                "aux and dual rows must share counterparties"
            );
            body.push(TAG_BROADCAST);
            put_u64(&mut body, b.iteration);
            put_f64(&mut body, b.rho);
            body.push(b.done as u8);
            let (rows, h) = rows_shape(&b.aux_row);
            put_u32(&mut body, rows);
            put_u32(&mut body, h);
            for (k, c) in b.aux_row.counterparties.iter().enumerate() {
                assert!(b.aux_row.rows[k].len() == h && b.dual_row.rows[k].len() == h, "ragged rows");
                put_u32(&mut body, *c);
                b.aux_row.rows[k].iter().for_each(|v| put_f64(&mut body, *v));
                b.dual_row.rows[k].iter().for_each(|v| put_f64(&mut body, *v));
            }
        }
        Message::Join { user_id } => {
            body.push(TAG_JOIN);
            put_u32(&mut body, *user_id);
        }
    }
    let mut out = Vec::with_capacity(body.len() + 4);
    put_u32(&mut out, body.len());
    out.extend_from_slice(&body);
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, kind: DecodeErrorKind) -> DecodeError {
        DecodeError {
            offset: self.pos,
            kind,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(DecodeErrorKind::Truncated {
                needed: n - (self.buf.len() - self.pos),
            }));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<usize, DecodeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self) -> Result<f64, DecodeError> {
        let at = self.pos;
        let v = f64::from_le_bytes(self.take(8)?.try_into().unwrap());
        if !v.is_finite() {
            return Err(DecodeError {
                offset: at,
                kind: DecodeErrorKind::NonFinite,
            });
        }
        Ok(v)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, DecodeError> {
        // check the whole run up front so a huge declared size cannot allocate
        if (self.buf.len() - self.pos) / 8 < n {
            return Err(self.err(DecodeErrorKind::Truncated {
                needed: n * 8 - (self.buf.len() - self.pos),
            }));
        }
        (0..n).map(|_| self.f64()).collect()
    }

    fn rows_header(&mut self, floats_per_row: usize) -> Result<(usize, usize), DecodeError> {
        let rows = self.u32()?;
        let h = self.u32()?;
        let per_row = 4usize.saturating_add(h.saturating_mul(8).saturating_mul(floats_per_row));
        let remaining = self.buf.len() - self.pos;
        if rows.saturating_mul(per_row) > remaining {
            return Err(self.err(DecodeErrorKind::Truncated {
                needed: rows.saturating_mul(per_row) - remaining,
            }));
        }
        Ok((rows, h))
    }
}

/// Decodes one complete frame, including its length prefix.
pub fn decode_frame(buf: &[u8]) -> Result<Message, DecodeError> {
    let mut c = Cursor { buf, pos: 0 };
    let declared = c.u32()?;
    if declared > MAX_FRAME_LEN {
        return Err(DecodeError {
            offset: 0,
            kind: DecodeErrorKind::TooLarge(declared),
        });
    }
    if declared != buf.len() - 4 {
        return Err(DecodeError {
            offset: 0,
            kind: DecodeErrorKind::LengthMismatch {
                declared,
                actual: buf.len() - 4,
            },
        });
    }
    let tag_at = c.pos;
    let msg = match c.u8()? {
        TAG_PROPOSAL => {
            let user_id = c.u32()?;
            let iteration = c.u64()?;
            let (rows, h) = c.rows_header(1)?;
            let mut trades = TradeMatrix::zeros(Vec::with_capacity(rows), 0);
            for _ in 0..rows {
                let at = c.pos;
                let cp = c.u32()?;
                if cp == user_id {
                    return Err(DecodeError {
                        offset: at,
                        kind: DecodeErrorKind::SelfTrade(cp),
                    });
                }
                trades.counterparties.push(cp);
                trades.rows.push(c.f64s(h)?);
            }
            Message::Proposal(TradeProposal {
                user_id,
                iteration,
                trades,
            })
        }
        TAG_BROADCAST => {
            let iteration = c.u64()?;
            let rho = c.f64()?;
            let flag_at = c.pos;
            let done = match c.u8()? {
                0 => false,
                1 => true,
                f => {
                    return Err(DecodeError {
                        offset: flag_at,
                        kind: DecodeErrorKind::InvalidFlag(f),
                    })
                }
            };
            let (rows, h) = c.rows_header(2)?;
            let mut aux = TradeMatrix::zeros(Vec::with_capacity(rows), 0);
            let mut dual = TradeMatrix::zeros(Vec::with_capacity(rows), 0);
            for _ in 0..rows {
                let cp = c.u32()?;
                aux.counterparties.push(cp);
                dual.counterparties.push(cp);
                aux.rows.push(c.f64s(h)?);
                dual.rows.push(c.f64s(h)?);
            }
            Message::Broadcast(CoordinatorBroadcast {
                iteration,
                aux_row: aux,
                dual_row: dual,
                rho,
                done,
            })
        }
        TAG_JOIN => Message::Join { user_id: c.u32()? },
        t => {
            return Err(DecodeError {
                offset: tag_at,
                kind: DecodeErrorKind::UnknownTag(t),
            })
        }
    };
    if c.pos != buf.len() {
        return Err(c.err(DecodeErrorKind::TrailingBytes(buf.len() - c.pos)));
    }
    Ok(msg)
}

/// Reads one whole frame from a stream. Returns `Ok(None)` on a clean end of
/// stream before the first byte.
pub fn read_frame<R: Read>(r: &mut R) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let n = u32::from_le_bytes(len) as usize;
    if n > MAX_FRAME_LEN {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("frame length {n} exceeds limit"),
        ));
    }
    let mut frame = Vec::with_capacity(n + 4);
    frame.extend_from_slice(&len);
    frame.resize(n + 4, 0);
    r.read_exact(&mut frame[4..])?;
    Ok(Some(frame))
}
