//! Weight files.
//!
//! ```text
//! ANET1
//! role <anchornet|global|local>
//! trained <0|1>
//! spec <line count>
//! <architecture text>
//! arrays <count>
//! <name> <n> <c> <h> <w>      (one line per array, declaration order)
//! data
//! <little-endian f32 payload, arrays back to back>
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{AnchorNetModel, ArchSpec, DownstreamModel, Network, Variant};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &str = "ANET1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    AnchorNet,
    Downstream(Variant),
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::AnchorNet => "anchornet",
            Role::Downstream(v) => v.as_str(),
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "anchornet" => Ok(Role::AnchorNet),
            "global" => Ok(Role::Downstream(Variant::Global)),
            "local" => Ok(Role::Downstream(Variant::Local)),
            other => Err(Error::format("weights", format!("unknown role {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct WeightFile {
    pub role: Role,
    pub trained: bool,
    pub spec: ArchSpec,
    pub arrays: Vec<(String, Tensor<f32>)>,
}

impl WeightFile {
    pub fn from_anchornet(m: &AnchorNetModel) -> Self {
        WeightFile::capture(Role::AnchorNet, m.is_trained(), m.network())
    }

    pub fn from_downstream(m: &DownstreamModel) -> Self {
        WeightFile::capture(Role::Downstream(m.variant()), true, m.network())
    }

    fn capture(role: Role, trained: bool, net: &Network<f32>) -> Self {
        WeightFile {
            role,
            trained,
            spec: net.spec().clone(),
            arrays: net
                .params()
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
        }
    }

    pub fn network(&self) -> Result<Network<f32>> {
        let mut net = Network::build(&self.spec, 0)?;
        net.params_mut().assign(&self.arrays)?;
        Ok(net)
    }

    pub fn into_anchornet(self) -> Result<AnchorNetModel> {
        if self.role != Role::AnchorNet {
            return Err(Error::format(
                "weights",
                format!("expected proposal weights, found {}", self.role.as_str()),
            ));
        }
        AnchorNetModel::from_network(self.network()?, self.trained)
    }

    pub fn into_downstream(self) -> Result<DownstreamModel> {
        match self.role {
            Role::Downstream(v) => Ok(DownstreamModel::from_network(self.network()?, v)),
            Role::AnchorNet => Err(Error::format(
                "weights",
                "expected downstream weights, found anchornet",
            )),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let spec = self.spec.to_text();
        let mut head = format!(
            "{MAGIC}\nrole {}\ntrained {}\nspec {}\n{spec}arrays {}\n",
            self.role.as_str(),
            u8::from(self.trained),
            spec.lines().count(),
            self.arrays.len()
        );
        for (name, t) in &self.arrays {
            let s = t.shape();
            head.push_str(&format!("{name} {} {} {} {}\n", s.n, s.c, s.h, s.w));
        }
        head.push_str("data\n");
        let mut out = head.into_bytes();
        for (_, t) in &self.arrays {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut line = || -> Result<&str> {
            let rest = &bytes[pos.min(bytes.len())..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::format("weights", "truncated header"))?;
            pos += end + 1;
            std::str::from_utf8(&rest[..end]).map_err(|_| Error::format("weights", "header is not text"))
        };
        if line()? != MAGIC {
            return Err(Error::format("weights", "unknown magic"));
        }
        let role = Role::parse(keyed(line()?, "role")?)?;
        let trained = match keyed(line()?, "trained")? {
            "0" => false,
            "1" => true,
            other => return Err(Error::format("weights", format!("bad trained flag {other:?}"))),
        };
        let spec_lines: usize = number(keyed(line()?, "spec")?)?;
        let mut text = String::new();
        for _ in 0..spec_lines {
            text.push_str(line()?);
            text.push('\n');
        }
        let spec: ArchSpec = text.parse()?;
        let count: usize = number(keyed(line()?, "arrays")?)?;
        let mut shapes = Vec::with_capacity(count);
        for _ in 0..count {
            let l = line()?;
            let mut it = l.split(' ');
            let name = it.next().unwrap_or("").to_string();
            let dims = it.map(number).collect::<Result<Vec<usize>>>()?;
            if name.is_empty() || dims.len() != 4 || dims.contains(&0) {
                return Err(Error::format("weights", format!("bad array line {l:?}")));
            }
            shapes.push((name, Shape::new(dims[0], dims[1], dims[2], dims[3])));
        }
        if line()? != "data" {
            return Err(Error::format("weights", "missing data marker"));
        }
        let mut payload = &bytes[pos..];
        let mut arrays = Vec::with_capacity(count);
        for (name, shape) in shapes {
            let len = shape.numel() * 4;
            if payload.len() < len {
                return Err(Error::format("weights", format!("payload ends inside {name}")));
            }
            let data = payload[..len]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            payload = &payload[len..];
            arrays.push((name, Tensor::from_vec(shape, data)?));
        }
        if !payload.is_empty() {
            return Err(Error::format("weights", "trailing bytes after payload"));
        }
        Ok(WeightFile {
            role,
            trained,
            spec,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        WeightFile::decode(&bytes)
    }
}

fn keyed<'a>(line: &'a str, key: &str) -> Result<&'a str> {
    line.strip_prefix(key)
        .and_then(|r| r.strip_prefix(' '))
        .ok_or_else(|| Error::format("weights", format!("expected {key:?}, found {line:?}")))
}

fn number(s: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| Error::format("weights", format!("bad number {s:?}")))
}

pub fn save_anchornet(m: &AnchorNetModel, path: &Path) -> Result<()> {
    WeightFile::from_anchornet(m).save(path)
}

pub fn load_anchornet(path: &Path) -> Result<AnchorNetModel> {
    WeightFile::load(path)?.into_anchornet()
}

pub fn save_downstream(m: &DownstreamModel, path: &Path) -> Result<()> {
    WeightFile::from_downstream(m).save(path)
}

pub fn load_downstream(path: &Path) -> Result<DownstreamModel> {
    WeightFile::load(path)?.into_downstream()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn miniature_round_trip() {
        let m = AnchorNetModel::<f32>::build(&ArchSpec::miniature(3), 5).unwrap();
        let bytes = WeightFile::from_anchornet(&m).encode();
        let back = WeightFile::decode(&bytes).unwrap();
        assert_eq!(back.encode(), bytes);
        let m2 = back.into_anchornet().unwrap();
        for (a, b) in m.network().params().iter().zip(m2.network().params().iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.data(), b.value.data());
        }
    }

    #[test]
    fn rejects_corruption() {
        let m = AnchorNetModel::<f32>::build(&ArchSpec::miniature(3), 5).unwrap();
        let mut bytes = WeightFile::from_anchornet(&m).encode();
        assert!(WeightFile::decode(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(matches!(WeightFile::decode(&bytes), Err(Error::Format { .. })));
        let f = WeightFile::from_anchornet(&m);
        assert!(f.into_downstream().is_err());
    }
}
