//! Dataset directory:
//!
//! ```text
//! manifest.json            schema version, window, horizon, split seed, splits
//! trace.jsonl orders.jsonl the raw logs
//! examples/<split>/<item>.bin
//! ```
//!
//! Item files hold `meta` (`item, n_days, window, horizon, examples`),
//! `members`, per-day `signal`/`self_sales`/`prop_scale` (`n_days × n` f32),
//! `active` (`n_days × n` u32), for each day `d` the blocks `day/d/edges`,
//! `day/d/desc_offsets`, `day/d/desc_targets`, and for each window start `s`
//! the blocks `example/s/{x,y_hist,y,x_true,active}` and `example/s/s_true/t`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::simkit::io::{read_orders, read_trace, write_orders, write_trace};
use crate::simkit::{ItemId, PromoterId};

use super::blocks::{BlockWriter, Blocks};
use super::dataset::{Dataset, Manifest, SCHEMA_VERSION};
use super::examples::{DayGraph, ItemSeries, TrainingExample};
use super::graph::DescendantSets;
use super::incidence::GlobalIndex;
use super::split::Split;
use super::subtable::SubTable;
use super::DataError;

pub const MANIFEST: &str = "manifest.json";

fn flat(rows: &[Vec<f64>]) -> impl Iterator<Item = f64> + '_ {
    rows.iter().flatten().copied()
}

pub fn encode_item(series: &ItemSeries, examples: &[TrainingExample], window: usize, horizon: usize) -> Vec<u8> {
    let n = series.len();
    let days = series.n_days();
    let mut w = BlockWriter::default();
    w.u32("meta", &[5], [series.item().0, days as u32, window as u32, horizon as u32, examples.len() as u32]);
    w.u32("members", &[n], series.subtable.members.iter().map(|p| p.0));
    w.f32("signal", &[days, n], flat(&series.signal));
    w.f32("self_sales", &[days, n], flat(&series.self_sales));
    w.f32("prop_scale", &[days, n], flat(&series.prop_scale));
    w.u32("active", &[days, n], series.days.iter().flat_map(|g| g.active.iter().map(|&a| a as u32)));
    for g in &series.days {
        let d = g.day;
        w.u32(&format!("day/{d}/edges"), &[g.edges.len(), 2], g.edges.iter().flat_map(|&(a, b)| [a, b]));
        let (off, tgt) = g.descendants.raw();
        w.u32(&format!("day/{d}/desc_offsets"), &[off.len()], off.iter().copied());
        w.u32(&format!("day/{d}/desc_targets"), &[tgt.len()], tgt.iter().copied());
    }
    for ex in examples {
        let s = ex.start;
        for (name, t) in
            [("x", &ex.x), ("y_hist", &ex.y_hist), ("y", &ex.y), ("x_true", &ex.x_true), ("active", &ex.active)]
        {
            w.f32(&format!("example/{s}/{name}"), t.shape(), t.data().iter().copied());
        }
        for (t, pairs) in ex.s_true.iter().enumerate() {
            w.u32(&format!("example/{s}/s_true/{t}"), &[pairs.len(), 2], pairs.iter().flat_map(|&(a, b)| [a, b]));
        }
    }
    w.finish()
}

fn rows(values: Vec<f64>, n: usize) -> Vec<Vec<f64>> {
    if n == 0 {
        return Vec::new();
    }
    values.chunks(n).map(<[f64]>::to_vec).collect()
}

fn pairs(dims: &[usize], data: &[u32], name: &str) -> Result<Vec<(u32, u32)>, DataError> {
    if dims.get(1) != Some(&2) {
        return Err(DataError::Corrupt(format!("`{name}` is not a pair list")));
    }
    Ok(data.chunks_exact(2).map(|c| (c[0], c[1])).collect())
}

/// Decodes one item file; `global` supplies the promoter rows.
pub fn decode_item(bytes: &[u8], global: &GlobalIndex) -> Result<(Arc<ItemSeries>, Vec<TrainingExample>), DataError> {
    let b = Blocks(super::blocks::read_blocks(bytes)?);
    let (_, meta) = b.u32("meta", 1)?;
    let &[item, days, window, horizon, count] = meta else {
        return Err(DataError::Corrupt("meta block has the wrong length".into()));
    };
    let (days, window, horizon) = (days as usize, window as usize, horizon as usize);
    let item = ItemId(item);
    let (_, members) = b.u32("members", 1)?;
    let members: Vec<PromoterId> = members.iter().map(|&p| PromoterId(p)).collect();
    let table = SubTable::new(item, members.clone());
    if table.members != members {
        return Err(DataError::Corrupt(format!("{item}: members are not strictly ascending")));
    }
    let n = table.len();
    let global_rows = members
        .iter()
        .map(|&p| global.row(p).ok_or_else(|| DataError::Corrupt(format!("{item}: {p} is not in the trace"))))
        .collect::<Result<Vec<_>, _>>()?;
    let (adims, active) = b.u32("active", 2)?;
    if adims != [days, n] {
        return Err(DataError::Corrupt(format!("{item}: active block has dims {adims:?}")));
    }
    let mut graphs = Vec::with_capacity(days);
    for d in 0..days {
        let (edims, edata) = b.u32(&format!("day/{d}/edges"), 2)?;
        let edges = pairs(&edims, edata, "edges")?;
        let (_, off) = b.u32(&format!("day/{d}/desc_offsets"), 1)?;
        let (_, tgt) = b.u32(&format!("day/{d}/desc_targets"), 1)?;
        let descendants = DescendantSets::from_raw(off.to_vec(), tgt.to_vec())?;
        let in_range = |v: u32| (v as usize) < n;
        if descendants.len() != n
            || !tgt.iter().all(|&v| in_range(v))
            || !edges.iter().all(|&(a, c)| in_range(a) && in_range(c))
        {
            return Err(DataError::Corrupt(format!("{item}/day {d}: local index out of range")));
        }
        let active = active[d * n..(d + 1) * n].iter().map(|&a| a != 0).collect();
        graphs.push(DayGraph { day: d as u32, active, edges, descendants });
    }
    let series = Arc::new(ItemSeries {
        subtable: table,
        global_rows,
        days: graphs,
        signal: rows(b.f32("signal", &[days, n])?, n),
        self_sales: rows(b.f32("self_sales", &[days, n])?, n),
        prop_scale: rows(b.f32("prop_scale", &[days, n])?, n),
    });
    if n == 0 || days < window + horizon || count as usize != days - window - horizon + 1 {
        return Err(DataError::Corrupt(format!("{item}: example count {count} does not fit {days} days")));
    }
    let tensor = |name: &str, s: usize, cols: usize| -> Result<Tensor, DataError> {
        let v = b.f32(&format!("example/{s}/{name}"), &[n, cols])?;
        Ok(Tensor::new(vec![n, cols], v).expect("dims checked"))
    };
    let mut examples = Vec::with_capacity(count as usize);
    for s in 0..count as usize {
        let mut s_true = Vec::with_capacity(horizon);
        for t in 0..horizon {
            let name = format!("example/{s}/s_true/{t}");
            let (dims, data) = b.u32(&name, 2)?;
            s_true.push(pairs(&dims, data, &name)?);
        }
        examples.push(TrainingExample {
            item,
            series: Arc::clone(&series),
            start: s,
            window,
            horizon,
            x: tensor("x", s, window)?,
            y_hist: tensor("y_hist", s, window)?,
            y: tensor("y", s, horizon)?,
            x_true: tensor("x_true", s, horizon)?,
            active: tensor("active", s, horizon)?,
            s_true,
        });
    }
    Ok((series, examples))
}

fn item_path(dir: &Path, split: Split, item: ItemId) -> std::path::PathBuf {
    dir.join("examples").join(split.name()).join(format!("{}.bin", item.0))
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<(), DataError> {
    fs::create_dir_all(dir)?;
    write_trace(&dir.join("trace.jsonl"), &ds.trace)?;
    write_orders(&dir.join("orders.jsonl"), &ds.orders)?;
    for split in Split::ALL {
        fs::create_dir_all(dir.join("examples").join(split.name()))?;
        for &item in ds.items(split) {
            let series = &ds.series[&item];
            let bytes = encode_item(series, &ds.examples[&item], ds.window(), ds.horizon());
            fs::write(item_path(dir, split, item), bytes)?;
        }
    }
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&ds.manifest)?)?;
    Ok(())
}

/// Reads only the schema version so mismatches are reported before the rest
/// of the manifest is interpreted.
fn check_schema(text: &str) -> Result<(), DataError> {
    #[derive(serde::Deserialize)]
    struct Version {
        schema_version: u32,
    }
    let v: Version = serde_json::from_str(text)?;
    if v.schema_version != SCHEMA_VERSION {
        return Err(DataError::Schema { found: v.schema_version, expected: SCHEMA_VERSION });
    }
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<Manifest, DataError> {
    let path = dir.join(MANIFEST);
    let text =
        fs::read_to_string(&path).map_err(|e| DataError::Missing { path: path.display().to_string(), source: e })?;
    check_schema(&text)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let manifest = load_manifest(dir)?;
    let open = |name: &str| {
        let p = dir.join(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(DataError::Missing {
                path: p.display().to_string(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
            })
        }
    };
    let trace = read_trace(&open("trace.jsonl")?)?;
    let orders = read_orders(&open("orders.jsonl")?)?;
    let index = GlobalIndex::from_trace(&trace);
    let mut series = BTreeMap::new();
    let mut examples = BTreeMap::new();
    for split in Split::ALL {
        for &item in manifest.splits.get(split) {
            let path = item_path(dir, split, item);
            let bytes =
                fs::read(&path).map_err(|e| DataError::Missing { path: path.display().to_string(), source: e })?;
            let (s, ex) = decode_item(&bytes, &index).map_err(|e| match e {
                DataError::Corrupt(m) => DataError::Corrupt(format!("{}: {m}", path.display())),
                other => other,
            })?;
            if s.item() != item
                || s.n_days() != manifest.n_days
                || ex.iter().any(|e| e.window != manifest.window || e.horizon != manifest.horizon)
            {
                return Err(DataError::Corrupt(format!("{} disagrees with the manifest", path.display())));
            }
            series.insert(item, s);
            examples.insert(item, ex);
        }
    }
    Ok(Dataset::assemble(manifest, trace, orders, series, examples))
}

/// SHA-256 over the manifest, the logs and every encoded item, in hex.
pub fn fingerprint(ds: &Dataset) -> Result<String, DataError> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&ds.manifest)?);
    h.update(serde_json::to_vec(&ds.trace)?);
    h.update(serde_json::to_vec(&ds.orders)?);
    for (item, s) in &ds.series {
        h.update(encode_item(s, &ds.examples[item], ds.window(), ds.horizon()));
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}
