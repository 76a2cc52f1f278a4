//! Named-tensor table files.
//!
//! Each entry is `name_len: u64 LE`, the UTF-8 name, then the tensor in
//! the [`Tensor`] wire format. Entries run to end of file. Architecture
//! settings are stored as `meta.*` tensors so a checkpoint is
//! self-describing.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::extractor::{ConvBlock, ExtractorConfig};
use crate::model::{Model, ModelConfig, Recurrence};
use crate::tensor::Tensor;

pub fn write_table<W: Write>(w: &mut W, entries: &[(String, &Tensor)]) -> std::io::Result<()> {
    for (name, t) in entries {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        t.write_to(w)?;
    }
    Ok(())
}

pub fn read_table<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    let mut out = Vec::new();
    loop {
        let mut word = [0u8; 8];
        match r.read(&mut word[..1]) {
            Ok(0) => return Ok(out),
            Ok(_) => {}
            Err(e) => return Err(Error::Data(format!("reading checkpoint: {e}"))),
        }
        r.read_exact(&mut word[1..])
            .map_err(|e| Error::Data(format!("truncated entry header: {e}")))?;
        let len = u64::from_le_bytes(word) as usize;
        if len > 4096 {
            return Err(Error::Data(format!("implausible name length {len}")));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Data(format!("truncated entry name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::Data("entry name is not UTF-8".into()))?;
        let t = Tensor::read_from(r)?;
        out.push((name, t));
    }
}

fn meta_entries(config: &ModelConfig) -> Vec<(String, Tensor)> {
    let e = &config.extractor;
    let blocks: Vec<f64> = e
        .blocks
        .iter()
        .flat_map(|b| [b.convs as f64, b.filters as f64])
        .collect();
    let flag = |b: bool| if b { 1.0 } else { 0.0 };
    vec![
        ("meta.input_size".into(), Tensor::scalar(e.input_size as f64)),
        ("meta.input_channels".into(), Tensor::scalar(e.input_channels as f64)),
        ("meta.blocks".into(), Tensor::new(&[e.blocks.len(), 2], blocks).unwrap()),
        (
            "meta.pools".into(),
            Tensor::vector(e.pool_after_block.iter().map(|&p| flag(p)).collect()),
        ),
        ("meta.dilation".into(), Tensor::scalar(e.last_block_dilation as f64)),
        ("meta.hidden".into(), Tensor::scalar(config.hidden as f64)),
        ("meta.classes".into(), Tensor::scalar(config.classes as f64)),
        ("meta.recurrence".into(), Tensor::scalar(config.recurrence.code())),
        (
            "meta.time_order".into(),
            Tensor::vector(config.time_order.iter().map(|&c| c as f64).collect()),
        ),
    ]
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let meta = meta_entries(&model.config);
    let mut entries: Vec<(String, &Tensor)> = meta.iter().map(|(n, t)| (n.clone(), t)).collect();
    entries.extend(model.named_params());
    let mut out = Vec::new();
    write_table(&mut out, &entries).expect("write to Vec cannot fail");
    out
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let table = read_table(&mut &bytes[..])?;
    let get = |name: &str| {
        table
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Data(format!("checkpoint lacks '{name}'")))
    };
    let int = |name: &str| -> Result<usize> {
        let v = get(name)?.item();
        if v < 0.0 || v.fract() != 0.0 {
            return Err(Error::Data(format!("'{name}' is not a count: {v}")));
        }
        Ok(v as usize)
    };
    let blocks = get("meta.blocks")?
        .data()
        .chunks_exact(2)
        .map(|c| ConvBlock {
            convs: c[0] as usize,
            filters: c[1] as usize,
        })
        .collect();
    let extractor = ExtractorConfig {
        blocks,
        pool_after_block: get("meta.pools")?.data().iter().map(|&v| v != 0.0).collect(),
        last_block_dilation: int("meta.dilation")?,
        input_size: int("meta.input_size")?,
        input_channels: int("meta.input_channels")?,
    };
    let recurrence = Recurrence::from_code(get("meta.recurrence")?.item())
        .ok_or_else(|| Error::Data("unknown recurrence code".into()))?;
    let config = ModelConfig {
        extractor,
        hidden: int("meta.hidden")?,
        classes: int("meta.classes")?,
        recurrence,
        time_order: get("meta.time_order")?.data().iter().map(|&v| v as usize).collect(),
    };
    let mut model = Model::init(config, 0).map_err(|e| Error::Data(format!("checkpoint config: {e}")))?;
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    let mut values = Vec::with_capacity(names.len());
    for name in &names {
        values.push(get(name)?.clone());
    }
    let mut idx = 0;
    let mut mismatch = None;
    model.visit_mut(&mut |t| {
        let v = &values[idx];
        if v.shape() != t.shape() && mismatch.is_none() {
            mismatch = Some(format!("'{}' is {:?}, expected {:?}", names[idx], v.shape(), t.shape()));
        }
        *t = v.clone();
        idx += 1;
    });
    if let Some(msg) = mismatch {
        return Err(Error::Dimension(msg));
    }
    Ok(model)
}
