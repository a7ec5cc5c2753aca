use std::rc::Rc;

use crate::autodiff::layers::{gru_sequence, AttentionVars, GruVars};
use crate::autodiff::{Bound, Csr, Segments, Tape, Tensor, Var};

use super::ModelError;

/// Descendant-attention graph convolution and its GRU.
#[derive(Clone, Debug)]
pub struct LocalVars {
    pub w1: Var,
    pub w2: Var,
    pub att: AttentionVars,
    pub gru: GruVars,
}

/// Hypergraph convolution and its GRU.
#[derive(Clone, Debug)]
pub struct GlobalVars {
    pub w1: Var,
    pub w2: Var,
    pub att: AttentionVars,
    pub gru: GruVars,
}

impl LocalVars {
    pub fn bind(bound: &Bound) -> Result<Self, ModelError> {
        Ok(Self {
            w1: bound.var("local.w1")?,
            w2: bound.var("local.w2")?,
            att: AttentionVars::bind(bound, "local.att")?,
            gru: GruVars::bind(bound, "local.gru")?,
        })
    }
}

impl GlobalVars {
    pub fn bind(bound: &Bound) -> Result<Self, ModelError> {
        Ok(Self {
            w1: bound.var("global.w1")?,
            w2: bound.var("global.w2")?,
            att: AttentionVars::bind(bound, "global.att")?,
            gru: GruVars::bind(bound, "global.gru")?,
        })
    }
}

/// Additive attention over ragged groups with precomputed projections:
/// element `j` scores `vᵀ tanh(q[seg[j]] + k[key[j]])` and contributes
/// `values[key[j]]` to its segment.
fn pooled_attention(
    tape: &mut Tape,
    score: Var,
    q_proj: Var,
    k_proj: Var,
    values: Var,
    seg: &Rc<Segments>,
    keys: &[usize],
) -> Result<Var, ModelError> {
    let q = tape.gather_rows(q_proj, seg.ids())?;
    let k = tape.gather_rows(k_proj, keys)?;
    let s = tape.add(q, k)?;
    let s = tape.tanh(s);
    let s = tape.matmul(s, score)?;
    let w = tape.segment_softmax(s, seg)?;
    let v = tape.gather_rows(values, keys)?;
    Ok(tape.segment_weighted_sum(w, v, seg)?)
}

/// `h_{d→m} = W₂ Concat(h_d, W₁ r)` for every promoter; the message from `d`
/// does not depend on the receiving `m`.
fn messages(tape: &mut Tape, lv: &LocalVars, h: Var, r: Var) -> Result<Var, ModelError> {
    let n = tape.value(h).rows();
    let rw = tape.matmul(r, lv.w1)?;
    let rep = tape.gather_rows(rw, &vec![0; n])?;
    let cat = tape.concat(&[h, rep], 1)?;
    Ok(tape.matmul(cat, lv.w2)?)
}

fn pair_segments(sampled: &[Vec<u32>]) -> Result<(Rc<Segments>, Vec<usize>), ModelError> {
    let mut ids = Vec::new();
    let mut keys = Vec::new();
    for (m, ds) in sampled.iter().enumerate() {
        for &d in ds {
            ids.push(m);
            keys.push(d as usize);
        }
    }
    Ok((Rc::new(Segments::new(ids, sampled.len())?), keys))
}

struct LocalProjections {
    msg: Var,
    q: Var,
    k: Var,
}

fn local_projections(tape: &mut Tape, lv: &LocalVars, h: Var, r: Var) -> Result<LocalProjections, ModelError> {
    let msg = messages(tape, lv, h, r)?;
    let q = tape.matmul(h, lv.att.w_query)?;
    let k = tape.matmul(msg, lv.att.w_key)?;
    Ok(LocalProjections { msg, q, k })
}

fn local_step(
    tape: &mut Tape,
    lv: &LocalVars,
    h: Var,
    p: &LocalProjections,
    sampled: &[Vec<u32>],
) -> Result<Var, ModelError> {
    let (seg, keys) = pair_segments(sampled)?;
    if keys.is_empty() {
        return Ok(h);
    }
    let agg = pooled_attention(tape, lv.att.score, p.q, p.k, p.msg, &seg, &keys)?;
    Ok(tape.add(agg, h)?)
}

/// One day of the local convolution: `h'_m = Att-Agg({h_{d→m} : d ∈ D'(m)}) + h_m`
/// with `h` the `n × d_m` base embeddings, `r` the `1 × d_r` item embedding and
/// `sampled[m]` the sampled descendants of `m`.
pub fn local_conv_step(
    tape: &mut Tape,
    lv: &LocalVars,
    h: Var,
    r: Var,
    sampled: &[Vec<u32>],
) -> Result<Var, ModelError> {
    check_rows(tape, h, sampled.len(), "local_conv_step")?;
    let p = local_projections(tape, lv, h, r)?;
    local_step(tape, lv, h, &p, sampled)
}

/// Runs the day-wise local convolution over the window and folds the results
/// with the local GRU from a zero state; returns `n × hidden`.
pub fn local_encode(
    tape: &mut Tape,
    lv: &LocalVars,
    h: Var,
    r: Var,
    days: &[Vec<Vec<u32>>],
) -> Result<Var, ModelError> {
    let n = tape.value(h).rows();
    let p = local_projections(tape, lv, h, r)?;
    let mut xs = Vec::with_capacity(days.len());
    for sampled in days {
        check_rows(tape, h, sampled.len(), "local_encode")?;
        xs.push(local_step(tape, lv, h, &p, sampled)?);
    }
    let hidden = tape.value(lv.gru.u_z).rows();
    let h0 = tape.constant(Tensor::zeros(&[n, hidden]));
    Ok(gru_sequence(tape, &lv.gru, h0, &xs)?)
}

fn check_rows(tape: &Tape, h: Var, n: usize, op: &str) -> Result<(), ModelError> {
    let rows = tape.value(h).rows();
    if rows != n {
        return Err(ModelError::Shape(format!("{op}: {rows} embeddings but {n} descendant lists")));
    }
    Ok(())
}

/// One day of the global hypergraph: every item with at least one
/// participating promoter, as a hyperedge over global promoter rows.
#[derive(Clone, Debug, PartialEq)]
pub struct DayHyperedges {
    pub items: Vec<usize>,
    /// Hyperedge index of every (hyperedge, promoter) incidence.
    pub seg: Segments,
    /// Promoter row of every incidence.
    pub members: Vec<usize>,
    /// `rows × |items|`: which hyperedges each promoter belongs to.
    pub membership: Csr,
}

impl DayHyperedges {
    /// `columns[i]` lists the promoter rows of item column `i`; empty columns are dropped.
    pub fn from_columns(n_rows: usize, columns: &[Vec<u32>]) -> Result<Self, ModelError> {
        let mut items = Vec::new();
        let mut ids = Vec::new();
        let mut members = Vec::new();
        let mut triplets = Vec::new();
        for (i, col) in columns.iter().enumerate().filter(|(_, c)| !c.is_empty()) {
            let k = items.len();
            items.push(i);
            for &m in col {
                ids.push(k);
                members.push(m as usize);
                triplets.push((m as usize, k, 1.0));
            }
        }
        let membership = Csr::from_triplets(n_rows, items.len(), &triplets)?;
        let seg = Segments::new(ids, items.len())?;
        Ok(Self { items, seg, members, membership })
    }
}

/// Projected attention keys of the whole promoter table; shared by every day.
pub fn global_keys(tape: &mut Tape, gv: &GlobalVars, promoters: Var) -> Result<Var, ModelError> {
    Ok(tape.matmul(promoters, gv.att.w_key)?)
}

fn hyperedge_step(
    tape: &mut Tape,
    gv: &GlobalVars,
    promoters: Var,
    keys: Var,
    r_items: Var,
    day: &DayHyperedges,
) -> Result<Var, ModelError> {
    let seg = Rc::new(day.seg.clone());
    let q = tape.matmul(r_items, gv.att.w_query)?;
    let agg = pooled_attention(tape, gv.att.score, q, keys, promoters, &seg, &day.members)?;
    let mut att = tape.sigmoid(agg);
    let mut counts = vec![0usize; day.items.len()];
    for &s in day.seg.ids() {
        counts[s] += 1;
    }
    if counts.contains(&0) {
        // σ(0) would leak 0.5 into hyperedges without members.
        let mask = Tensor::new(vec![counts.len(), 1], counts.iter().map(|&c| (c > 0) as u8 as f64).collect())?;
        let mask = tape.constant(mask);
        att = tape.mul(att, mask)?;
    }
    let rw = tape.matmul(r_items, gv.w1)?;
    Ok(tape.concat(&[att, rw], 1)?)
}

/// `r̃'_i = Concat(σ(Σ_m α_{mi} h̃_m), W₁ r̃_i)` for every hyperedge of `day`, with
/// `promoters` the embedding rows `day.members` index and `r_items` one row per
/// hyperedge. Output is `|items| × (d_m + d_r)`.
pub fn hyperedge_aggregate(
    tape: &mut Tape,
    gv: &GlobalVars,
    promoters: Var,
    r_items: Var,
    day: &DayHyperedges,
) -> Result<Var, ModelError> {
    let keys = global_keys(tape, gv, promoters)?;
    hyperedge_step(tape, gv, promoters, keys, r_items, day)
}

/// `h̃'_m = Relu(Σ_{i ∋ m} W₂ r̃'_i)` for every row of `day.membership`.
pub fn promoter_aggregate(
    tape: &mut Tape,
    gv: &GlobalVars,
    day: &DayHyperedges,
    r_prime: Var,
) -> Result<Var, ModelError> {
    let proj = tape.matmul(r_prime, gv.w2)?;
    let sum = tape.sparse_matmul(&Rc::new(day.membership.clone()), proj)?;
    Ok(tape.relu(sum))
}

/// One day of hypergraph convolution over the whole promoter table, given the
/// keys from [`global_keys`]; returns `|promoters| × d_m`.
pub fn global_day(
    tape: &mut Tape,
    gv: &GlobalVars,
    promoters: Var,
    keys: Var,
    items: Var,
    day: &DayHyperedges,
) -> Result<Var, ModelError> {
    if day.items.is_empty() {
        let shape = tape.value(promoters).shape().to_vec();
        return Ok(tape.constant(Tensor::zeros(&shape)));
    }
    let r = tape.gather_rows(items, &day.items)?;
    let r_prime = hyperedge_step(tape, gv, promoters, keys, r, day)?;
    promoter_aggregate(tape, gv, day, r_prime)
}

/// Folds the rows `rows` of the per-day outputs of [`global_day`] with the
/// global GRU from a zero state; returns `|rows| × hidden`.
pub fn global_encode(tape: &mut Tape, gv: &GlobalVars, daily: &[Var], rows: &[usize]) -> Result<Var, ModelError> {
    let mut xs = Vec::with_capacity(daily.len());
    for &d in daily {
        xs.push(tape.gather_rows(d, rows)?);
    }
    let hidden = tape.value(gv.gru.u_z).rows();
    let h0 = tape.constant(Tensor::zeros(&[rows.len(), hidden]));
    Ok(gru_sequence(tape, &gv.gru, h0, &xs)?)
}

/// `ĥ = Concat(h̃^Global, h^Local)` on the feature axis.
pub fn fuse(tape: &mut Tape, local: Var, global: Var) -> Result<Var, ModelError> {
    Ok(tape.concat(&[global, local], 1)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamStore;
    use crate::model::{init_params, Mode, ModelConfig, Variant};

    fn setup() -> (ModelConfig, ParamStore) {
        let cfg =
            ModelConfig { d_m: 4, d_r: 3, gru_hidden: 5, attention_hidden: 3, window: 3, ..ModelConfig::default() };
        let s = init_params(&cfg, Variant { mode: Mode::S2P, gcn: true }, 6, 2).unwrap();
        (cfg, s)
    }

    fn embeddings(tape: &mut Tape, s: &ParamStore, n: usize) -> (Var, Var) {
        let h = s.get("embed.promoter").unwrap().clone();
        let rows: Vec<Vec<f64>> = (0..n).map(|i| h.row(i).to_vec()).collect();
        let hv = tape.constant(Tensor::from_rows(&rows).unwrap());
        let r = s.get("embed.item").unwrap().row(0).to_vec();
        let rv = tape.constant(Tensor::new(vec![1, r.len()], r).unwrap());
        (hv, rv)
    }

    #[test]
    fn no_descendants_is_identity() {
        let (_, s) = setup();
        let mut tape = Tape::new();
        let b = s.attach(&mut tape);
        let lv = LocalVars::bind(&b).unwrap();
        let (h, r) = embeddings(&mut tape, &s, 4);
        let out = local_conv_step(&mut tape, &lv, h, r, &vec![Vec::new(); 4]).unwrap();
        assert_eq!(tape.value(out), tape.value(h));
    }

    #[test]
    fn one_descendant_is_message_plus_residual() {
        let (_, s) = setup();
        let mut tape = Tape::new();
        let b = s.attach(&mut tape);
        let lv = LocalVars::bind(&b).unwrap();
        let (h, r) = embeddings(&mut tape, &s, 4);
        let out = local_conv_step(&mut tape, &lv, h, r, &[vec![3], vec![], vec![], vec![]]).unwrap();
        let msg = messages(&mut tape, &lv, h, r).unwrap();
        let (hv, mv, ov) = (tape.value(h), tape.value(msg), tape.value(out));
        for c in 0..4 {
            assert!((ov.get(0, c) - (mv.get(3, c) + hv.get(0, c))).abs() < 1e-12);
        }
        assert_eq!(ov.row(1), hv.row(1));
    }

    #[test]
    fn descendant_order_does_not_matter() {
        let (_, s) = setup();
        let run = |lists: Vec<Vec<u32>>| {
            let mut tape = Tape::new();
            let b = s.attach(&mut tape);
            let lv = LocalVars::bind(&b).unwrap();
            let (h, r) = embeddings(&mut tape, &s, 4);
            let out = local_conv_step(&mut tape, &lv, h, r, &lists).unwrap();
            tape.value(out).clone()
        };
        let a = run(vec![vec![1, 2, 3], vec![3], vec![], vec![]]);
        let b = run(vec![vec![3, 1, 2], vec![3], vec![], vec![]]);
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn local_encode_shape_and_single_day() {
        let (cfg, s) = setup();
        let mut tape = Tape::new();
        let b = s.attach(&mut tape);
        let lv = LocalVars::bind(&b).unwrap();
        let (h, r) = embeddings(&mut tape, &s, 4);
        let day = vec![vec![1], vec![], vec![], vec![]];
        let enc = local_encode(&mut tape, &lv, h, r, std::slice::from_ref(&day)).unwrap();
        assert_eq!(tape.value(enc).shape(), &[4, cfg.gru_hidden]);
        let step = local_conv_step(&mut tape, &lv, h, r, &day).unwrap();
        let h0 = tape.constant(Tensor::zeros(&[4, cfg.gru_hidden]));
        let cell = crate::autodiff::layers::gru_cell(&mut tape, &lv.gru, h0, step).unwrap();
        assert!(tape.value(enc).max_abs_diff(tape.value(cell)) < 1e-12);
    }

    fn two_item_day() -> DayHyperedges {
        // Item 0 = {0, 1, 2}, item 1 = {2, 4}, item 2 empty.
        DayHyperedges::from_columns(6, &[vec![0, 1, 2], vec![2, 4], vec![]]).unwrap()
    }

    #[test]
    fn empty_items_are_dropped() {
        let day = two_item_day();
        assert_eq!(day.items, vec![0, 1]);
        assert_eq!(day.members, vec![0, 1, 2, 2, 4]);
        let b = day.membership.to_dense();
        assert_eq!(b.row(2), &[1.0, 1.0]);
        assert_eq!(b.row(5), &[0.0, 0.0]);
    }

    #[test]
    fn single_member_hyperedge_attends_to_it() {
        let (_, s) = setup();
        let day = DayHyperedges::from_columns(6, &[vec![], vec![4]]).unwrap();
        let mut tape = Tape::new();
        let b = s.attach(&mut tape);
        let gv = GlobalVars::bind(&b).unwrap();
        let promoters = b.var("embed.promoter").unwrap();
        let items = b.var("embed.item").unwrap();
        let r = tape.gather_rows(items, &day.items).unwrap();
        let rp = hyperedge_aggregate(&mut tape, &gv, promoters, r, &day).unwrap();
        let v = tape.value(rp);
        assert_eq!(v.shape(), &[1, 4 + 3]);
        let h4 = s.get("embed.promoter").unwrap().row(4);
        for c in 0..4 {
            assert!((v.get(0, c) - 1.0 / (1.0 + (-h4[c]).exp())).abs() < 1e-12);
        }
        let hp = promoter_aggregate(&mut tape, &gv, &day, rp).unwrap();
        let hv = tape.value(hp);
        assert!(hv.data().iter().all(|&x| x >= 0.0));
        assert!(hv.row(0).iter().all(|&x| x == 0.0), "promoter in no hyperedge");
    }

    #[test]
    fn global_encode_gathers_rows() {
        let (cfg, s) = setup();
        let day = two_item_day();
        let mut tape = Tape::new();
        let b = s.attach(&mut tape);
        let gv = GlobalVars::bind(&b).unwrap();
        let promoters = b.var("embed.promoter").unwrap();
        let items = b.var("embed.item").unwrap();
        let keys = global_keys(&mut tape, &gv, promoters).unwrap();
        let d0 = global_day(&mut tape, &gv, promoters, keys, items, &day).unwrap();
        let all = global_encode(&mut tape, &gv, &[d0, d0], &[0, 1, 2, 3, 4, 5]).unwrap();
        let some = global_encode(&mut tape, &gv, &[d0, d0], &[4, 2]).unwrap();
        assert_eq!(tape.value(some).shape(), &[2, cfg.gru_hidden]);
        assert_eq!(tape.value(some).row(0), tape.value(all).row(4));
        assert_eq!(tape.value(some).row(1), tape.value(all).row(2));
    }

    #[test]
    fn duplicated_column_doubles_the_contribution() {
        let (_, s) = setup();
        let mut tape = Tape::new();
        let b = s.attach(&mut tape);
        let gv = GlobalVars::bind(&b).unwrap();
        let rp = tape.constant(Tensor::from_rows(&[vec![0.3, -0.2, 0.5, 0.1, 0.4, -0.6, 0.2]]).unwrap());
        let mk = |v: f64| DayHyperedges {
            items: vec![0],
            seg: Segments::new(vec![0], 1).unwrap(),
            members: vec![0],
            membership: Csr::from_triplets(1, 1, &[(0, 0, v)]).unwrap(),
        };
        let once = tape.matmul(rp, gv.w2).unwrap();
        let twice = mk(2.0);
        let pre = tape.sparse_matmul(&Rc::new(twice.membership.clone()), once).unwrap();
        for (a, b) in tape.value(pre).data().iter().zip(tape.value(once).data()) {
            assert!((a - 2.0 * b).abs() < 1e-15);
        }
        let out = promoter_aggregate(&mut tape, &gv, &mk(1.0), rp).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(tape.value(once).data()) {
            assert_eq!(*a, b.max(0.0));
        }
    }

    #[test]
    fn fuse_puts_global_first() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::full(&[2, 3], 1.0));
        let g = tape.constant(Tensor::zeros(&[2, 2]));
        let f = fuse(&mut tape, l, g).unwrap();
        let v = tape.value(f);
        assert_eq!(v.shape(), &[2, 5]);
        assert_eq!(v.row(0), &[0.0, 0.0, 1.0, 1.0, 1.0]);
    }
}
