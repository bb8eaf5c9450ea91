//! Binary checkpoints: `DFRA`, a little-endian `u16` version, then sections
//! `[u8 tag][u64 length][payload]`.

use crate::adapters::{Family, LowRankAdapter, SharedAdapterBank};
use crate::dam::DamState;
use crate::error::{Error, Result};
use crate::models::AdapterSlot;
use crate::numerics::{take_u64, Matrix};

use super::Model;

pub const MAGIC: &[u8; 4] = b"DFRA";
pub const VERSION: u16 = 1;

const TAG_CONFIG: u8 = 1;
const TAG_DAM: u8 = 2;
const TAG_MODULAR: u8 = 3;
const TAG_THEORY: u8 = 4;

const SLOT_FROZEN: u8 = 0;
const SLOT_OWN: u8 = 1;
const SLOT_SHARED: u8 = 2;

/// Trainable state of a model; the frozen base is rebuilt from the config.
#[derive(Debug, Clone, PartialEq)]
pub enum Weights {
    Modular {
        /// Row-major over `(layer, family)`.
        slots: Vec<AdapterSlot>,
        bank: Vec<(Family, LowRankAdapter)>,
    },
    Theory {
        w: Matrix,
    },
}

impl Weights {
    pub fn of(model: &Model) -> Self {
        match model {
            Model::Modular(net) => Weights::Modular {
                slots: (0..net.num_layers())
                    .flat_map(|l| Family::ALL.map(|f| net.slot(l, f).clone()))
                    .collect(),
                bank: net.bank().iter().map(|(f, a)| (f, a.clone())).collect(),
            },
            Model::Theory(g) => Weights::Theory { w: g.net().w().clone() },
        }
    }

    /// Installs these weights into a model built from the same config.
    pub fn apply(&self, model: &mut Model) -> Result<()> {
        match (self, model) {
            (Weights::Modular { slots, bank }, Model::Modular(net)) => {
                if slots.len() != net.num_layers() * Family::COUNT {
                    return Err(Error::Format(format!("{} adapter slots for {} layers", slots.len(), net.num_layers())));
                }
                net.detach_all();
                let mut b = SharedAdapterBank::new();
                for (f, a) in bank {
                    b.insert(*f, a.clone());
                }
                *net.bank_mut() = b;
                for (i, slot) in slots.iter().enumerate() {
                    let fam = Family::from_index(i % Family::COUNT).expect("in range");
                    net.set_slot(i / Family::COUNT, fam, slot.clone())?;
                }
                Ok(())
            }
            (Weights::Theory { w }, Model::Theory(g)) => g.net_mut().set_w(w.clone()),
            _ => Err(Error::Format("checkpoint architecture differs from the config".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Canonical config text.
    pub config: String,
    pub dam: Option<DamState>,
    pub weights: Option<Weights>,
}

fn section(out: &mut Vec<u8>, tag: u8, payload: &[u8]) {
    out.push(tag);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

fn write_dam(dam: &DamState) -> Vec<u8> {
    let mut p = Vec::new();
    p.extend_from_slice(&dam.rho().to_le_bytes());
    dam.logits().write_le(&mut p);
    match dam.gamma_bin() {
        Some(bin) => {
            p.push(1);
            bin.write_le(&mut p);
        }
        None => p.push(0),
    }
    p
}

fn read_dam(mut p: &[u8]) -> Result<DamState> {
    let rho = f64::from_bits(take_u64(&mut p)?);
    let logits = Matrix::read_le(&mut p)?;
    let mut dam = DamState::from_logits(logits, rho).map_err(|e| Error::Format(e.to_string()))?;
    match take_u8(&mut p)? {
        0 => {}
        1 => dam
            .set_gamma_bin(Matrix::read_le(&mut p)?)
            .map_err(|e| Error::Format(e.to_string()))?,
        other => return Err(Error::Format(format!("bad selection flag {other}"))),
    }
    Ok(dam)
}

fn take_u8(input: &mut &[u8]) -> Result<u8> {
    let (&b, rest) = input.split_first().ok_or_else(|| Error::Format("unexpected end of data".into()))?;
    *input = rest;
    Ok(b)
}

fn write_modular(slots: &[AdapterSlot], bank: &[(Family, LowRankAdapter)]) -> Vec<u8> {
    let mut p = Vec::new();
    p.extend_from_slice(&(slots.len() as u64).to_le_bytes());
    for slot in slots {
        match slot {
            AdapterSlot::Frozen => p.push(SLOT_FROZEN),
            AdapterSlot::Own(a) => {
                p.push(SLOT_OWN);
                a.write_le(&mut p);
            }
            AdapterSlot::Shared => p.push(SLOT_SHARED),
        }
    }
    p.extend_from_slice(&(bank.len() as u64).to_le_bytes());
    for (f, a) in bank {
        p.push(f.index() as u8);
        a.write_le(&mut p);
    }
    p
}

fn read_modular(mut p: &[u8]) -> Result<Weights> {
    let n = take_u64(&mut p)? as usize;
    let mut slots = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        slots.push(match take_u8(&mut p)? {
            SLOT_FROZEN => AdapterSlot::Frozen,
            SLOT_OWN => AdapterSlot::Own(LowRankAdapter::read_le(&mut p)?),
            SLOT_SHARED => AdapterSlot::Shared,
            other => return Err(Error::Format(format!("bad slot kind {other}"))),
        });
    }
    let nb = take_u64(&mut p)? as usize;
    let mut bank = Vec::with_capacity(nb.min(Family::COUNT));
    for _ in 0..nb {
        let idx = take_u8(&mut p)? as usize;
        let fam = Family::from_index(idx).ok_or_else(|| Error::Format(format!("bad family index {idx}")))?;
        bank.push((fam, LowRankAdapter::read_le(&mut p)?));
    }
    Ok(Weights::Modular { slots, bank })
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        section(&mut out, TAG_CONFIG, self.config.as_bytes());
        if let Some(dam) = &self.dam {
            section(&mut out, TAG_DAM, &write_dam(dam));
        }
        match &self.weights {
            Some(Weights::Modular { slots, bank }) => section(&mut out, TAG_MODULAR, &write_modular(slots, bank)),
            Some(Weights::Theory { w }) => {
                let mut p = Vec::new();
                w.write_le(&mut p);
                section(&mut out, TAG_THEORY, &p);
            }
            None => {}
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 6 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut rest = &bytes[6..];
        let mut config = None;
        let mut dam = None;
        let mut weights = None;
        while !rest.is_empty() {
            let tag = take_u8(&mut rest)?;
            let len = take_u64(&mut rest)? as usize;
            if rest.len() < len {
                return Err(Error::Format(format!("section {tag} truncated")));
            }
            let (payload, tail) = rest.split_at(len);
            rest = tail;
            match tag {
                TAG_CONFIG => {
                    config = Some(String::from_utf8(payload.to_vec()).map_err(|_| Error::Format("config is not UTF-8".into()))?)
                }
                TAG_DAM => dam = Some(read_dam(payload)?),
                TAG_MODULAR => weights = Some(read_modular(payload)?),
                TAG_THEORY => {
                    let mut p = payload;
                    weights = Some(Weights::Theory { w: Matrix::read_le(&mut p)? });
                }
                other => return Err(Error::Format(format!("unknown section tag {other}"))),
            }
        }
        Ok(Self {
            config: config.ok_or_else(|| Error::Format("checkpoint has no config section".into()))?,
            dam,
            weights,
        })
    }
}
