//! Text key files.
//!
//! ```text
//! gradmark-key v1
//! d 64
//! k 16
//! seed 7            (or `seed none`)
//! M
//! <d lines, k space-separated values each>
//! b
//! 0110100111010010
//! checksum <sha256 hex of every byte above this line>
//! ```

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::WatermarkKey;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

const MAGIC: &str = "gradmark-key v1";

fn checksum(body: &str) -> String {
    hex::encode(Sha256::digest(body.as_bytes()))
}

impl WatermarkKey {
    pub fn to_key_string(&self) -> String {
        let mut body = String::new();
        let _ = writeln!(body, "{MAGIC}");
        let _ = writeln!(body, "d {}", self.d());
        let _ = writeln!(body, "k {}", self.k());
        match self.seed {
            Some(s) => {
                let _ = writeln!(body, "seed {s}");
            }
            None => body.push_str("seed none\n"),
        }
        body.push_str("M\n");
        for row in self.embedding.row_iter() {
            let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(body, "{}", line.join(" "));
        }
        body.push_str("b\n");
        let bits: String = self.bits.iter().map(|b| if *b == 1 { '1' } else { '0' }).collect();
        let _ = writeln!(body, "{bits}");
        let sum = checksum(&body);
        let _ = writeln!(body, "checksum {sum}");
        body
    }

    pub fn from_key_str(text: &str) -> Result<Self> {
        let err = |line: usize, message: &str| Error::Parse {
            line,
            message: message.to_string(),
        };
        let split = text.rfind("checksum ").ok_or_else(|| err(0, "missing checksum line"))?;
        let (body, tail) = text.split_at(split);
        let checksum_line = body.lines().count() + 1;
        let stated = tail.trim_start_matches("checksum ").trim();
        if stated != checksum(body) {
            return Err(err(checksum_line, "checksum mismatch: key file is corrupted"));
        }

        let lines: Vec<&str> = body.lines().collect();
        let get = |i: usize| lines.get(i).copied().ok_or_else(|| err(i + 1, "truncated key file"));
        if get(0)? != MAGIC {
            return Err(err(1, "not a key file"));
        }
        let field = |i: usize, name: &str| -> Result<&str> {
            let l = get(i)?;
            l.strip_prefix(name)
                .and_then(|r| r.strip_prefix(' '))
                .ok_or_else(|| err(i + 1, &format!("expected `{name} ...`")))
        };
        let d: usize = field(1, "d")?.parse().map_err(|_| err(2, "bad d"))?;
        let k: usize = field(2, "k")?.parse().map_err(|_| err(3, "bad k"))?;
        let seed = match field(3, "seed")? {
            "none" => None,
            s => Some(s.parse().map_err(|_| err(4, "bad seed"))?),
        };
        if get(4)? != "M" {
            return Err(err(5, "expected `M`"));
        }
        let mut data = Vec::with_capacity(d * k);
        for i in 0..d {
            let row: Vec<f64> = get(5 + i)?
                .split_whitespace()
                .map(|v| v.parse::<f64>().map_err(|_| err(6 + i, "bad matrix value")))
                .collect::<Result<_>>()?;
            if row.len() != k {
                return Err(err(6 + i, "matrix row length differs from k"));
            }
            data.extend(row);
        }
        if get(5 + d)? != "b" {
            return Err(err(6 + d, "expected `b`"));
        }
        let bits: Vec<u8> = get(6 + d)?
            .chars()
            .map(|c| match c {
                '0' => Ok(0),
                '1' => Ok(1),
                _ => Err(err(7 + d, "bits must be 0 or 1")),
            })
            .collect::<Result<_>>()?;
        WatermarkKey::new(Matrix::from_vec(d, k, data)?, bits, seed)
    }
}

pub fn write_key(key: &WatermarkKey, path: &Path) -> Result<()> {
    std::fs::write(path, key.to_key_string())?;
    Ok(())
}

pub fn read_key(path: &Path) -> Result<WatermarkKey> {
    WatermarkKey::from_key_str(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{RngStream, StreamLabel};
    use crate::watermark::keygen;

    #[test]
    fn roundtrip() {
        let key = keygen(&mut RngStream::new(12, StreamLabel::WatermarkKey), 6, 3).unwrap();
        let text = key.to_key_string();
        assert_eq!(WatermarkKey::from_key_str(&text).unwrap(), key);
    }

    #[test]
    fn tampering_is_detected() {
        let key = keygen(&mut RngStream::new(12, StreamLabel::WatermarkKey), 6, 3).unwrap();
        let text = key.to_key_string();
        let bits_line: String = key.bits.iter().map(|b| if *b == 1 { '1' } else { '0' }).collect();
        let flipped: String = bits_line.chars().map(|c| if c == '1' { '0' } else { '1' }).collect();
        let tampered = text.replacen(&format!("b\n{bits_line}"), &format!("b\n{flipped}"), 1);
        assert!(matches!(
            WatermarkKey::from_key_str(&tampered),
            Err(Error::Parse { .. })
        ));
    }
}
