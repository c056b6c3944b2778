//! Binary snapshot archive.
//!
//! Layout, all little-endian: the magic `HDPS1`, then records of
//! `u32 name_len, name bytes, u64 rows, u64 cols, rows*cols f64`.

use std::io::{Read, Write};

use hdpissa_core::{AdapterPair, Matrix, Method, TrainResult};

use crate::{CliError, CliResult};

pub const MAGIC: &[u8; 5] = b"HDPS1";

pub fn write_records<W: Write>(out: &mut W, records: &[(String, Matrix)]) -> std::io::Result<()> {
    out.write_all(MAGIC)?;
    for (name, m) in records {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(m.rows() as u64).to_le_bytes())?;
        out.write_all(&(m.cols() as u64).to_le_bytes())?;
        for x in m.data() {
            out.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

fn corrupt(msg: impl Into<String>) -> CliError {
    CliError::Config(format!("malformed snapshot archive: {}", msg.into()))
}

pub fn read_records(bytes: &[u8]) -> CliResult<Vec<(String, Matrix)>> {
    let mut r = bytes;
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic).map_err(|_| corrupt("truncated header"))?;
    if &magic != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let mut records = Vec::new();
    while !r.is_empty() {
        let mut u32b = [0u8; 4];
        let mut u64b = [0u8; 8];
        r.read_exact(&mut u32b).map_err(|_| corrupt("truncated record"))?;
        let len = u32::from_le_bytes(u32b) as usize;
        if r.len() < len {
            return Err(corrupt("truncated name"));
        }
        let name = std::str::from_utf8(&r[..len])
            .map_err(|_| corrupt("record name is not UTF-8"))?
            .to_string();
        r = &r[len..];
        r.read_exact(&mut u64b).map_err(|_| corrupt("truncated shape"))?;
        let rows = u64::from_le_bytes(u64b) as usize;
        r.read_exact(&mut u64b).map_err(|_| corrupt("truncated shape"))?;
        let cols = u64::from_le_bytes(u64b) as usize;
        let n = rows.checked_mul(cols).filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.len()));
        let n = n.ok_or_else(|| corrupt(format!("record `{name}` overruns the file")))?;
        let data = r[..n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        r = &r[n * 8..];
        let m = Matrix::from_vec(rows, cols, data).map_err(|e| corrupt(e.to_string()))?;
        records.push((name, m));
    }
    Ok(records)
}

/// Identifies the task a snapshot was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskFingerprint {
    pub kind: u8,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub target_rank: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl TaskFingerprint {
    fn to_matrix(&self) -> Matrix {
        // The seed is split so each half is exactly representable.
        Matrix::from_vec(
            1,
            8,
            vec![
                self.kind as f64,
                self.input_dim as f64,
                self.hidden_dim as f64,
                self.output_dim as f64,
                self.target_rank as f64,
                self.noise_std,
                (self.seed >> 32) as f64,
                (self.seed & 0xffff_ffff) as f64,
            ],
        )
        .expect("fixed length")
    }

    fn from_matrix(m: &Matrix) -> CliResult<Self> {
        let d = m.data();
        if d.len() != 8 {
            return Err(corrupt("meta.task has the wrong length"));
        }
        Ok(Self {
            kind: d[0] as u8,
            input_dim: d[1] as usize,
            hidden_dim: d[2] as usize,
            output_dim: d[3] as usize,
            target_rank: d[4] as usize,
            noise_std: d[5],
            seed: ((d[6] as u64) << 32) | d[7] as u64,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub task: TaskFingerprint,
    pub result: TrainResult,
}

fn scalar(x: f64) -> Matrix {
    Matrix::from_vec(1, 1, vec![x]).expect("1x1")
}

fn adapter_records(out: &mut Vec<(String, Matrix)>, tag: &str, snap: &[Vec<Option<AdapterPair>>]) {
    for (dev, layers) in snap.iter().enumerate() {
        for (l, pair) in layers.iter().enumerate() {
            if let Some(p) = pair {
                let prefix = format!("{tag}.{dev}.{l}");
                out.push((format!("{prefix}.a"), p.a.clone()));
                out.push((format!("{prefix}.b"), p.b.clone()));
                out.push((
                    format!("{prefix}.range"),
                    Matrix::from_vec(
                        1,
                        3,
                        vec![p.device_index as f64, p.component_lo as f64, p.component_hi as f64],
                    )
                    .expect("fixed length"),
                ));
            }
        }
    }
}

impl Snapshot {
    pub fn to_records(&self) -> Vec<(String, Matrix)> {
        let r = &self.result;
        let mut out = vec![
            ("meta.method".to_string(), scalar(r.method.code() as f64)),
            ("meta.devices".to_string(), scalar(r.devices as f64)),
            ("meta.rank".to_string(), scalar(r.rank as f64)),
            ("meta.layers".to_string(), scalar(r.w_init.len() as f64)),
            ("meta.task".to_string(), self.task.to_matrix()),
        ];
        for (l, w) in r.w_init.iter().enumerate() {
            out.push((format!("w_init.{l}"), w.clone()));
        }
        for (l, w) in r.w_final.iter().enumerate() {
            out.push((format!("w_final.{l}"), w.clone()));
        }
        adapter_records(&mut out, "adapter_init", &r.adapter_init);
        adapter_records(&mut out, "adapter_final", &r.adapter_final);
        out
    }

    pub fn write<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        write_records(out, &self.to_records())
    }

    pub fn read(bytes: &[u8]) -> CliResult<Self> {
        let records: std::collections::BTreeMap<String, Matrix> = read_records(bytes)?.into_iter().collect();
        let get = |name: &str| records.get(name).ok_or_else(|| corrupt(format!("missing record `{name}`")));
        let meta = |name: &str| -> CliResult<usize> { Ok(get(name)?.data().first().copied().unwrap_or(0.0) as usize) };

        let method = Method::from_code(meta("meta.method")? as u8).ok_or_else(|| corrupt("unknown method code"))?;
        let devices = meta("meta.devices")?;
        let rank = meta("meta.rank")?;
        let layers = meta("meta.layers")?;
        let task = TaskFingerprint::from_matrix(get("meta.task")?)?;
        let weights = |tag: &str| -> CliResult<Vec<Matrix>> {
            (0..layers).map(|l| get(&format!("{tag}.{l}")).cloned()).collect()
        };
        let adapters = |tag: &str| -> CliResult<Vec<Vec<Option<AdapterPair>>>> {
            (0..devices)
                .map(|dev| {
                    (0..layers)
                        .map(|l| {
                            let prefix = format!("{tag}.{dev}.{l}");
                            let Some(a) = records.get(&format!("{prefix}.a")) else {
                                return Ok(None);
                            };
                            let b = get(&format!("{prefix}.b"))?;
                            let range = get(&format!("{prefix}.range"))?.data();
                            if range.len() != 3 {
                                return Err(corrupt(format!("{prefix}.range has the wrong length")));
                            }
                            Ok(Some(AdapterPair {
                                a: a.clone(),
                                b: b.clone(),
                                device_index: range[0] as usize,
                                component_lo: range[1] as usize,
                                component_hi: range[2] as usize,
                            }))
                        })
                        .collect()
                })
                .collect()
        };
        let result = TrainResult {
            method,
            rank,
            devices,
            loss_curve: Vec::new(),
            lr_curve: Vec::new(),
            w_init: weights("w_init")?,
            w_final: weights("w_final")?,
            adapter_init: adapters("adapter_init")?,
            adapter_final: adapters("adapter_final")?,
            wall_steps: 0,
            eval_initial: f64::NAN,
            eval_final: f64::NAN,
        };
        Ok(Snapshot { task, result })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_round_trip_bit_exactly() {
        let m = Matrix::from_vec(2, 3, vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300, -2.5, 1.0 / 3.0]).unwrap();
        let recs = vec![("w".to_string(), m), ("empty".to_string(), Matrix::zeros(0, 4))];
        let mut buf = Vec::new();
        write_records(&mut buf, &recs).unwrap();
        assert_eq!(&buf[..5], MAGIC);
        let back = read_records(&buf).unwrap();
        assert_eq!(back.len(), 2);
        for ((n0, m0), (n1, m1)) in recs.iter().zip(&back) {
            assert_eq!(n0, n1);
            assert_eq!(m0.shape(), m1.shape());
            let bits = |m: &Matrix| m.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(m0), bits(m1));
        }
    }

    #[test]
    fn layout_is_little_endian() {
        let mut buf = Vec::new();
        write_records(&mut buf, &[("ab".to_string(), Matrix::from_vec(1, 1, vec![1.0]).unwrap())]).unwrap();
        let mut expect = MAGIC.to_vec();
        expect.extend_from_slice(&[2, 0, 0, 0, b'a', b'b']);
        expect.extend_from_slice(&1u64.to_le_bytes());
        expect.extend_from_slice(&1u64.to_le_bytes());
        expect.extend_from_slice(&1.0f64.to_le_bytes());
        assert_eq!(buf, expect);
    }

    #[test]
    fn rejects_corruption() {
        assert!(read_records(b"HDPS2").is_err());
        let mut buf = Vec::new();
        write_records(&mut buf, &[("w".to_string(), Matrix::zeros(2, 2))]).unwrap();
        assert!(read_records(&buf[..buf.len() - 1]).is_err());
        buf[5] = 200;
        assert!(read_records(&buf).is_err());
    }

    #[test]
    fn fingerprint_keeps_full_seed() {
        let f = TaskFingerprint {
            kind: 1,
            input_dim: 3,
            hidden_dim: 4,
            output_dim: 5,
            target_rank: 2,
            noise_std: 0.1,
            seed: u64::MAX - 7,
        };
        assert_eq!(TaskFingerprint::from_matrix(&f.to_matrix()).unwrap(), f);
    }
}
