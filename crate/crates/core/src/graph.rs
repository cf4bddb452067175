//! Heterogeneous multi-behavior global item-transition graph.
//!
//! Nodes are items; every ordered behavior pair `(o_i, o_j)` is a relation
//! (`click2purchase`, ...). Within each training session, adjacent events
//! add an edge labeled with their behavior pair, and non-adjacent events
//! sharing a behavior add a long-distance edge. Edges point forward in
//! time and their weight counts occurrences.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::par::Execution;
use crate::sessions::IndexedSession;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RelationType {
    pub src_behavior: usize,
    pub dst_behavior: usize,
}

/// Inbound edges of one relation in compressed form: the sources feeding
/// target `i` are `sources[offsets[i]..offsets[i + 1]]`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RelationCsr {
    pub offsets: Vec<usize>,
    pub sources: Vec<usize>,
    pub targets: Vec<usize>,
    pub weights: Vec<u32>,
}

impl RelationCsr {
    pub fn n_edges(&self) -> usize {
        self.sources.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GlobalGraph {
    n_items: usize,
    behaviors: Vec<String>,
    relations: Vec<RelationCsr>,
    /// Union over relations of inbound sources, ascending.
    union: Vec<Vec<usize>>,
}

/// One `(relation, src, dst)` occurrence.
type Triple = (usize, usize, usize);

/// Raw transition occurrences of one session, before accumulation.
pub fn session_transitions(events: &[(usize, usize)], n_behaviors: usize) -> Vec<Triple> {
    let mut out = Vec::new();
    for i in 0..events.len() {
        let (vi, oi) = events[i];
        if let Some(&(vj, oj)) = events.get(i + 1) {
            out.push((oi * n_behaviors + oj, vi, vj));
        }
        for &(vj, oj) in events.iter().skip(i + 2) {
            if oj == oi {
                out.push((oi * n_behaviors + oj, vi, vj));
            }
        }
    }
    out
}

impl GlobalGraph {
    /// Builds the graph from training sessions. With `neighbor_cap > 0` each
    /// item keeps, per relation, only its `neighbor_cap` heaviest inbound
    /// sources (ties to the smaller index); `0` keeps everything.
    pub fn build(
        sessions: &[IndexedSession],
        n_items: usize,
        behaviors: &[String],
        neighbor_cap: usize,
        exec: Execution,
    ) -> Result<Self> {
        if sessions.is_empty() {
            return Err(Error::Invalid("cannot build a graph from an empty training set".into()));
        }
        let nb = behaviors.len();
        for s in sessions {
            if let Some(&(i, b)) = s.events.iter().find(|&&(i, b)| i >= n_items || b >= nb) {
                return Err(Error::Invalid(format!(
                    "session {} has event ({i}, {b}) outside {n_items} items / {nb} behaviors",
                    s.session_id
                )));
            }
        }
        let mut triples: Vec<Triple> = exec
            .map(sessions, |s| session_transitions(&s.events, nb))
            .into_iter()
            .flatten()
            .collect();
        triples.sort_unstable();
        let mut edges: Vec<(usize, usize, usize, u32)> = Vec::new();
        for t in triples {
            match edges.last_mut() {
                Some(e) if (e.0, e.1, e.2) == t => e.3 += 1,
                _ => edges.push((t.0, t.1, t.2, 1)),
            }
        }
        Ok(Self::from_edges(n_items, behaviors.to_vec(), edges, neighbor_cap))
    }

    fn from_edges(
        n_items: usize,
        behaviors: Vec<String>,
        edges: Vec<(usize, usize, usize, u32)>,
        neighbor_cap: usize,
    ) -> Self {
        let n_rel = behaviors.len() * behaviors.len();
        // inbound[r][dst] = [(src, w)]
        let mut inbound: Vec<Vec<Vec<(usize, u32)>>> = vec![vec![Vec::new(); n_items]; n_rel];
        for (r, src, dst, w) in edges {
            inbound[r][dst].push((src, w));
        }
        let relations = inbound
            .into_iter()
            .map(|mut per_item| {
                let mut csr = RelationCsr {
                    offsets: vec![0],
                    ..Default::default()
                };
                for (dst, list) in per_item.iter_mut().enumerate() {
                    list.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
                    if neighbor_cap > 0 {
                        list.truncate(neighbor_cap);
                    }
                    for &(src, w) in list.iter() {
                        csr.sources.push(src);
                        csr.targets.push(dst);
                        csr.weights.push(w);
                    }
                    csr.offsets.push(csr.sources.len());
                }
                csr
            })
            .collect::<Vec<_>>();
        let mut union = vec![Vec::new(); n_items];
        for csr in &relations {
            for (&src, &dst) in csr.sources.iter().zip(&csr.targets) {
                union[dst].push(src);
            }
        }
        for u in &mut union {
            u.sort_unstable();
            u.dedup();
        }
        GlobalGraph {
            n_items,
            behaviors,
            relations,
            union,
        }
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn behaviors(&self) -> &[String] {
        &self.behaviors
    }

    pub fn n_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn relation_index(&self, r: RelationType) -> usize {
        r.src_behavior * self.behaviors.len() + r.dst_behavior
    }

    pub fn relation_type(&self, index: usize) -> RelationType {
        let nb = self.behaviors.len();
        RelationType {
            src_behavior: index / nb,
            dst_behavior: index % nb,
        }
    }

    /// `click2purchase`-style name.
    pub fn relation_name(&self, index: usize) -> String {
        let r = self.relation_type(index);
        format!("{}2{}", self.behaviors[r.src_behavior], self.behaviors[r.dst_behavior])
    }

    pub fn relation(&self, index: usize) -> &RelationCsr {
        &self.relations[index]
    }

    pub fn n_edges(&self) -> usize {
        self.relations.iter().map(RelationCsr::n_edges).sum()
    }

    /// Inbound neighbors `j` with an edge `(j, r, item)`, heaviest first,
    /// then by ascending index.
    pub fn neighbors(&self, item: usize, relation: RelationType) -> Vec<(usize, u32)> {
        let nb = self.behaviors.len();
        if item >= self.n_items || relation.src_behavior >= nb || relation.dst_behavior >= nb {
            return Vec::new();
        }
        let csr = &self.relations[self.relation_index(relation)];
        let (lo, hi) = (csr.offsets[item], csr.offsets[item + 1]);
        csr.sources[lo..hi]
            .iter()
            .copied()
            .zip(csr.weights[lo..hi].iter().copied())
            .collect()
    }

    /// Inbound neighbors of `item` across all relations, ascending, deduplicated.
    pub fn union_neighbors(&self, item: usize) -> &[usize] {
        &self.union[item]
    }

    /// All edges as `(src, relation, dst, weight)` in serialization order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, usize, u32)> + '_ {
        self.relations.iter().enumerate().flat_map(|(r, csr)| {
            (0..csr.n_edges()).map(move |e| (csr.sources[e], r, csr.targets[e], csr.weights[e]))
        })
    }

    /// Header `#n_items=<n><TAB>behaviors=<b1,b2,..>`, then
    /// `src<TAB>relation_name<TAB>dst<TAB>weight` lines.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("#n_items={}\tbehaviors={}\n", self.n_items, self.behaviors.join(","));
        for (src, r, dst, w) in self.edges() {
            let _ = writeln!(out, "{src}\t{}\t{dst}\t{w}", self.relation_name(r));
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            message: "missing graph header".into(),
        })?;
        let bad_header = || Error::Parse {
            line: 1,
            message: format!("malformed graph header `{header}`"),
        };
        let (n_part, b_part) = header
            .strip_prefix('#')
            .and_then(|h| h.split_once('\t'))
            .ok_or_else(bad_header)?;
        let n_items: usize = n_part
            .strip_prefix("n_items=")
            .and_then(|n| n.parse().ok())
            .ok_or_else(bad_header)?;
        let behaviors: Vec<String> = b_part
            .strip_prefix("behaviors=")
            .ok_or_else(bad_header)?
            .split(',')
            .map(str::to_string)
            .collect();
        let nb = behaviors.len();
        let names: Vec<String> = (0..nb * nb)
            .map(|r| format!("{}2{}", behaviors[r / nb], behaviors[r % nb]))
            .collect();

        let mut edges = Vec::new();
        for (n, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse { line: n + 1, message };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(err(format!("expected 4 fields, got {}", f.len())));
            }
            let src: usize = f[0].parse().map_err(|_| err(format!("bad src `{}`", f[0])))?;
            let dst: usize = f[2].parse().map_err(|_| err(format!("bad dst `{}`", f[2])))?;
            let w: u32 = f[3].parse().map_err(|_| err(format!("bad weight `{}`", f[3])))?;
            let r = names
                .iter()
                .position(|x| x == f[1])
                .ok_or_else(|| err(format!("unknown relation `{}`", f[1])))?;
            if src >= n_items || dst >= n_items || w == 0 {
                return Err(err(format!("edge ({src}, {dst}, {w}) out of range")));
            }
            edges.push((r, src, dst, w));
        }
        Ok(Self::from_edges(n_items, behaviors, edges, 0))
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_tsv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(&text)
    }
}
