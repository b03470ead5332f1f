//! Formal concept analysis over thresholded RRC tables.
//!
//! Objects are classifiers and attributes are fine-tuned autoencoders. Subsets
//! are `u64` bitmasks, so a context holds at most 64 of each.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluate::RrcMatrix;

pub type Set = u64;

pub const MAX_KEYS: usize = 64;

fn full(n: usize) -> Set {
    if n == 64 {
        u64::MAX
    } else {
        (1u64 << n) - 1
    }
}

fn members(s: Set) -> impl Iterator<Item = usize> {
    (0..64).filter(move |i| s >> i & 1 == 1)
}

fn subset(a: Set, b: Set) -> bool {
    a & !b == 0
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormalContext {
    pub objects: Vec<String>,
    pub attributes: Vec<String>,
    /// Per object, the set of attributes it has.
    pub incidence: Vec<Set>,
}

impl FormalContext {
    pub fn new(objects: Vec<String>, attributes: Vec<String>, incidence: Vec<Set>) -> Result<Self> {
        let ctx = Self { objects, attributes, incidence };
        ctx.validate()?;
        Ok(ctx)
    }

    pub fn from_matrix(objects: Vec<String>, attributes: Vec<String>, rows: &[Vec<bool>]) -> Result<Self> {
        let incidence = rows
            .iter()
            .map(|r| r.iter().enumerate().filter(|(_, &b)| b).fold(0, |s, (m, _)| s | 1 << m))
            .collect();
        if rows.iter().any(|r| r.len() != attributes.len()) {
            return Err(Error::shape("incidence rows must match the attribute count"));
        }
        Self::new(objects, attributes, incidence)
    }

    pub fn validate(&self) -> Result<()> {
        for (keys, what) in [(&self.objects, "object"), (&self.attributes, "attribute")] {
            if keys.is_empty() || keys.len() > MAX_KEYS {
                return Err(Error::contract(format!("{what} count {} outside 1..={MAX_KEYS}", keys.len())));
            }
            let unique: BTreeSet<&String> = keys.iter().collect();
            if unique.len() != keys.len() {
                return Err(Error::contract(format!("duplicate {what} key")));
            }
        }
        if self.incidence.len() != self.objects.len() {
            return Err(Error::shape("one incidence row per object"));
        }
        if self.incidence.iter().any(|&r| !subset(r, self.all_attributes())) {
            return Err(Error::contract("incidence refers to unknown attributes"));
        }
        Ok(())
    }

    pub fn all_objects(&self) -> Set {
        full(self.objects.len())
    }

    pub fn all_attributes(&self) -> Set {
        full(self.attributes.len())
    }

    pub fn has(&self, g: usize, m: usize) -> bool {
        self.incidence[g] >> m & 1 == 1
    }

    /// Attributes shared by every object in `a`.
    pub fn object_prime(&self, a: Set) -> Set {
        members(a).fold(self.all_attributes(), |acc, g| acc & self.incidence[g])
    }

    /// Objects having every attribute in `b`.
    pub fn attribute_prime(&self, b: Set) -> Set {
        (0..self.objects.len())
            .filter(|&g| subset(b, self.incidence[g]))
            .fold(0, |acc, g| acc | 1 << g)
    }

    pub fn object_closure(&self, a: Set) -> Set {
        self.attribute_prime(self.object_prime(a))
    }

    pub fn attribute_closure(&self, b: Set) -> Set {
        self.object_prime(self.attribute_prime(b))
    }

    pub fn names(&self, s: Set, objects: bool) -> Vec<&str> {
        let keys = if objects { &self.objects } else { &self.attributes };
        members(s).map(|i| keys[i].as_str()).collect()
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![String::new()];
        header.extend(self.attributes.iter().cloned());
        w.write_record(&header)?;
        for (g, name) in self.objects.iter().enumerate() {
            let mut rec = vec![name.clone()];
            rec.extend((0..self.attributes.len()).map(|m| if self.has(g, m) { "1" } else { "0" }.to_owned()));
            w.write_record(&rec)?;
        }
        w.into_inner().map_err(|e| Error::Format { what: "csv", detail: e.to_string() })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::orchestrator::write_atomic(path, &self.to_csv()?)
    }

    pub fn read_csv(reader: impl Read) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let attributes: Vec<String> = r.headers()?.iter().skip(1).map(str::to_owned).collect();
        let mut objects = Vec::new();
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            objects.push(rec[0].to_owned());
            let row = rec
                .iter()
                .skip(1)
                .map(|v| match v {
                    "1" | "true" | "x" | "X" => Ok(true),
                    "0" | "false" | "" => Ok(false),
                    other => Err(Error::Format { what: "context csv", detail: format!("cell {other:?}") }),
                })
                .collect::<Result<Vec<bool>>>()?;
            rows.push(row);
        }
        Self::from_matrix(objects, attributes, &rows)
    }
}

/// Incidence (j, A_i) holds iff RRC(A_i -> j) >= t. Undefined entries never
/// hold.
pub fn threshold_context(rrc: &RrcMatrix, t: f64) -> Result<FormalContext> {
    let rows: Vec<Vec<bool>> = (0..rrc.cols.len())
        .map(|j| rrc.values.iter().map(|row| row[j].is_some_and(|v| v >= t)).collect())
        .collect();
    FormalContext::from_matrix(rrc.cols.clone(), rrc.rows.clone(), &rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FormalConcept {
    pub extent: Set,
    pub intent: Set,
}

impl FormalConcept {
    pub fn is_closed_in(&self, ctx: &FormalContext) -> bool {
        ctx.object_prime(self.extent) == self.intent && ctx.attribute_prime(self.intent) == self.extent
    }

    /// Subconcept order by extent inclusion.
    pub fn le(&self, other: &FormalConcept) -> bool {
        subset(self.extent, other.extent)
    }
}

/// All formal concepts, obtained by closing every subset of the smaller side.
/// Sorted by descending extent size, then by extent bits.
pub fn enumerate_concepts(ctx: &FormalContext) -> Vec<FormalConcept> {
    let mut set = BTreeSet::new();
    if ctx.attributes.len() <= ctx.objects.len() {
        for b in 0..=ctx.all_attributes() {
            let extent = ctx.attribute_prime(b);
            set.insert(FormalConcept { extent, intent: ctx.object_prime(extent) });
        }
    } else {
        for a in 0..=ctx.all_objects() {
            let intent = ctx.object_prime(a);
            set.insert(FormalConcept { extent: ctx.attribute_prime(intent), intent });
        }
    }
    let mut out: Vec<FormalConcept> = set.into_iter().collect();
    out.sort_by_key(|c| (std::cmp::Reverse(c.extent.count_ones()), c.extent));
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptLattice {
    pub context: FormalContext,
    pub concepts: Vec<FormalConcept>,
    /// Covering pairs `(upper, lower)`.
    pub edges: Vec<(usize, usize)>,
    pub top: usize,
    pub bottom: usize,
    /// Objects introduced at each concept (object concept labels).
    pub object_labels: Vec<Vec<usize>>,
    /// Attributes introduced at each concept (attribute concept labels).
    pub attribute_labels: Vec<Vec<usize>>,
}

pub fn build_lattice(ctx: &FormalContext, concepts: &[FormalConcept]) -> Result<ConceptLattice> {
    let mut concepts = concepts.to_vec();
    concepts.sort_by_key(|c| (std::cmp::Reverse(c.extent.count_ones()), c.extent));
    concepts.dedup();
    if let Some(bad) = concepts.iter().find(|c| !c.is_closed_in(ctx)) {
        return Err(Error::contract(format!("not a concept: extent {:#b}, intent {:#b}", bad.extent, bad.intent)));
    }
    let find = |extent: Set| concepts.iter().position(|c| c.extent == extent);
    let top = find(ctx.all_objects()).ok_or_else(|| Error::contract("missing top concept"))?;
    let bottom = find(ctx.attribute_prime(ctx.all_attributes())).ok_or_else(|| Error::contract("missing bottom concept"))?;
    let n = concepts.len();
    let lt = |a: usize, b: usize| a != b && concepts[a].le(&concepts[b]);
    let mut edges = Vec::new();
    for upper in 0..n {
        for lower in 0..n {
            if lt(lower, upper) && !(0..n).any(|m| lt(lower, m) && lt(m, upper)) {
                edges.push((upper, lower));
            }
        }
    }
    let mut object_labels = vec![Vec::new(); n];
    for g in 0..ctx.objects.len() {
        let c = find(ctx.object_closure(1 << g)).ok_or_else(|| Error::contract("missing object concept"))?;
        object_labels[c].push(g);
    }
    let mut attribute_labels = vec![Vec::new(); n];
    for m in 0..ctx.attributes.len() {
        let c = find(ctx.attribute_prime(1 << m)).ok_or_else(|| Error::contract("missing attribute concept"))?;
        attribute_labels[c].push(m);
    }
    Ok(ConceptLattice {
        context: ctx.clone(),
        concepts,
        edges,
        top,
        bottom,
        object_labels,
        attribute_labels,
    })
}

pub fn concept_lattice(ctx: &FormalContext) -> Result<ConceptLattice> {
    build_lattice(ctx, &enumerate_concepts(ctx))
}

/// True iff every pair of concepts is comparable.
pub fn is_total_order(lattice: &ConceptLattice) -> bool {
    let c = &lattice.concepts;
    c.iter().enumerate().all(|(i, a)| c[i + 1..].iter().all(|b| a.le(b) || b.le(a)))
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// Graphviz digraph with the top concept first. Objects are printed above the
/// node marker and attributes below it.
pub fn export_dot(lattice: &ConceptLattice) -> String {
    let ctx = &lattice.context;
    let mut s = String::from("digraph lattice {\n  rankdir=TB;\n  node [shape=box, style=rounded, fontsize=10];\n  edge [arrowhead=none];\n");
    for i in 0..lattice.concepts.len() {
        let objs: Vec<&str> = lattice.object_labels[i].iter().map(|&g| ctx.objects[g].as_str()).collect();
        let attrs: Vec<&str> = lattice.attribute_labels[i].iter().map(|&m| ctx.attributes[m].as_str()).collect();
        let label = format!("{}\\n\u{25cf}\\n{}", escape(&objs.join(", ")), escape(&attrs.join(", ")));
        let _ = writeln!(s, "  c{i} [label=\"{label}\"];");
    }
    for &(u, l) in &lattice.edges {
        let _ = writeln!(s, "  c{u} -> c{l};");
    }
    s.push_str("}\n");
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdBand {
    /// Exclusive lower end.
    pub lo: f64,
    /// Inclusive upper end.
    pub hi: f64,
    pub concept_count: usize,
    pub total_order: bool,
}

/// Thresholds at which the context stays constant, as half-open bands
/// `(lo, hi]` between consecutive distinct RRC values starting from 0.
pub fn threshold_bands(rrc: &RrcMatrix) -> Result<Vec<ThresholdBand>> {
    let mut cuts: Vec<f64> = rrc.values.iter().flatten().flatten().copied().filter(|v| *v > 0.0).collect();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let mut bands = Vec::new();
    let mut lo = 0.0;
    for hi in cuts {
        let lattice = concept_lattice(&threshold_context(rrc, hi)?)?;
        bands.push(ThresholdBand {
            lo,
            hi,
            concept_count: lattice.concepts.len(),
            total_order: is_total_order(&lattice),
        });
        lo = hi;
    }
    Ok(bands)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluate::{rrc, AccuracyMatrix, RrcConvention};
    use proptest::prelude::*;

    fn keys(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i}")).collect()
    }

    fn ctx(rows: &[Set], m: usize) -> FormalContext {
        FormalContext::new(keys("g", rows.len()), keys("m", m), rows.to_vec()).unwrap()
    }

    fn brute_force(c: &FormalContext) -> BTreeSet<FormalConcept> {
        let mut out = BTreeSet::new();
        for extent in 0..=c.all_objects() {
            for intent in 0..=c.all_attributes() {
                let fc = FormalConcept { extent, intent };
                let shared = (0..64).filter(|m| intent >> m & 1 == 1).all(|m| {
                    (0..64).filter(|g| extent >> g & 1 == 1).all(|g| c.has(g, m))
                });
                if shared && fc.is_closed_in(c) {
                    out.insert(fc);
                }
            }
        }
        out
    }

    fn context_strategy() -> impl Strategy<Value = FormalContext> {
        (1usize..=5, 1usize..=5).prop_flat_map(|(g, m)| {
            prop::collection::vec(0u64..(1 << m), g).prop_map(move |rows| ctx(&rows, m))
        })
    }

    #[test]
    fn degenerate_contexts() {
        let f = ctx(&[0b111, 0b111], 3);
        assert_eq!(enumerate_concepts(&f), vec![FormalConcept { extent: 0b11, intent: 0b111 }]);
        let e = ctx(&[0, 0, 0], 2);
        let concepts = enumerate_concepts(&e);
        assert_eq!(concepts.len(), 2);
        assert!(concepts.contains(&FormalConcept { extent: 0b111, intent: 0 }));
        assert!(concepts.contains(&FormalConcept { extent: 0, intent: 0b11 }));
    }

    #[test]
    fn prime_of_empty_set_is_everything() {
        let c = ctx(&[0b01, 0b10], 2);
        assert_eq!(c.object_prime(0), 0b11);
        assert_eq!(c.attribute_prime(0), 0b11);
    }

    #[test]
    fn staircase_gives_a_chain() {
        for n in 1..=6 {
            // Object g has attributes 0..g; the last attribute is unused.
            let rows: Vec<Set> = (0..n).map(full).collect();
            let l = concept_lattice(&ctx(&rows, n)).unwrap();
            assert_eq!(l.concepts.len(), n + 1);
            assert!(is_total_order(&l));
            assert_eq!(l.edges.len(), n);
        }
    }

    #[test]
    fn diamond_is_not_total() {
        let l = concept_lattice(&ctx(&[0b01, 0b10], 2)).unwrap();
        assert_eq!(l.concepts.len(), 4);
        assert!(!is_total_order(&l));
        assert_eq!(l.edges.len(), 4);
    }

    #[test]
    fn single_concept_dot() {
        let l = concept_lattice(&ctx(&[0b1], 1)).unwrap();
        let dot = export_dot(&l);
        assert_eq!(dot.matches(" [label=").count(), 1);
        assert!(!dot.contains("->"));
        assert_eq!(dot, export_dot(&l));
    }

    #[test]
    fn threshold_extremes() {
        let m = AccuracyMatrix::read_csv(include_str!("../tests/fixtures/cross_accuracy.csv").as_bytes()).unwrap();
        let r = rrc(&m, RrcConvention::Diagonal).unwrap();
        let all = threshold_context(&r, 0.0).unwrap();
        assert!(all.incidence.iter().all(|&row| row == all.all_attributes()));
        let none = threshold_context(&r, r.max_value() + 1e-9).unwrap();
        assert!(none.incidence.iter().all(|&row| row == 0));
        assert_eq!(all.objects, ["L", "A", "V", "I", "R"]);
        assert_eq!(all.attributes, ["A_L", "A_A", "A_V", "A_I", "A_R"]);
        // Inclusive comparison on a diagonal entry.
        let one = threshold_context(&r, 1.0).unwrap();
        assert!((0..5).all(|i| one.has(i, i)));
    }

    #[test]
    fn undefined_rrc_never_holds() {
        let r = RrcMatrix {
            rows: vec!["A_x".into()],
            cols: vec!["x".into()],
            values: vec![vec![None]],
            convention: RrcConvention::Diagonal,
        };
        assert_eq!(threshold_context(&r, 0.0).unwrap().incidence, vec![0]);
    }

    #[test]
    fn context_csv_round_trip() {
        let c = ctx(&[0b101, 0b010, 0b111], 3);
        assert_eq!(FormalContext::read_csv(&c.to_csv().unwrap()[..]).unwrap(), c);
    }

    #[test]
    fn bands_cover_positive_values() {
        let m = AccuracyMatrix::read_csv(include_str!("../tests/fixtures/cross_accuracy.csv").as_bytes()).unwrap();
        let r = rrc(&m, RrcConvention::Diagonal).unwrap();
        let bands = threshold_bands(&r).unwrap();
        assert_eq!(bands.first().unwrap().lo, 0.0);
        assert_eq!(bands.last().unwrap().hi, r.max_value());
        assert!(bands.windows(2).all(|w| w[0].hi == w[1].lo));
    }

    proptest! {
        #[test]
        fn enumeration_matches_brute_force(c in context_strategy()) {
            let fast: BTreeSet<FormalConcept> = enumerate_concepts(&c).into_iter().collect();
            prop_assert_eq!(fast, brute_force(&c));
        }

        #[test]
        fn closure_is_extensive_monotone_idempotent(c in context_strategy(), a in any::<u64>(), b in any::<u64>()) {
            let (a, b) = (a & c.all_objects(), b & c.all_objects());
            let ca = c.object_closure(a);
            prop_assert!(subset(a, ca));
            prop_assert_eq!(c.object_closure(ca), ca);
            prop_assert!(subset(c.object_closure(a & b), c.object_closure(a)));
            prop_assert!(subset(c.object_prime(a | b), c.object_prime(a)));
            let m = b & c.all_attributes();
            prop_assert!(subset(m, c.attribute_closure(m)));
        }

        #[test]
        fn extents_closed_under_intersection(c in context_strategy()) {
            let concepts = enumerate_concepts(&c);
            let extents: BTreeSet<Set> = concepts.iter().map(|x| x.extent).collect();
            for x in &extents {
                for y in &extents {
                    prop_assert!(extents.contains(&(x & y)));
                }
            }
        }

        #[test]
        fn hasse_edges_are_covers_and_labels_partition(c in context_strategy()) {
            let l = concept_lattice(&c).unwrap();
            let edges: BTreeSet<(usize, usize)> = l.edges.iter().copied().collect();
            for &(a, b) in &l.edges {
                for &(b2, d) in &l.edges {
                    if b == b2 {
                        prop_assert!(!edges.contains(&(a, d)));
                    }
                }
            }
            let objs: Vec<usize> = l.object_labels.iter().flatten().copied().collect();
            let attrs: Vec<usize> = l.attribute_labels.iter().flatten().copied().collect();
            prop_assert_eq!(objs.len(), c.objects.len());
            prop_assert_eq!(objs.iter().collect::<BTreeSet<_>>().len(), c.objects.len());
            prop_assert_eq!(attrs.len(), c.attributes.len());
            prop_assert_eq!(attrs.iter().collect::<BTreeSet<_>>().len(), c.attributes.len());
            prop_assert_eq!(l.concepts[l.top].extent, c.all_objects());
            prop_assert!(l.concepts.iter().all(|x| subset(x.intent, l.concepts[l.bottom].intent)));
        }

        #[test]
        fn higher_threshold_shrinks_incidence(vals in prop::collection::vec(0.0f64..1.5, 9), t1 in 0.0f64..1.5, dt in 0.0f64..1.0) {
            let r = RrcMatrix {
                rows: keys("A_", 3),
                cols: keys("c", 3),
                values: vals.chunks(3).map(|r| r.iter().map(|v| Some(*v)).collect()).collect(),
                convention: RrcConvention::Diagonal,
            };
            let lo = threshold_context(&r, t1).unwrap();
            let hi = threshold_context(&r, t1 + dt).unwrap();
            for (a, b) in hi.incidence.iter().zip(&lo.incidence) {
                prop_assert!(subset(*a, *b));
            }
        }
    }
}
