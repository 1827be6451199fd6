//! Candidate trees, top-k pruning and flattening into a tree-attention block.

use std::cmp::Ordering;
use std::collections::HashMap;

use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::model::Block;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TreeNode {
    /// `None` for children of the virtual root.
    pub parent: Option<usize>,
    /// 1 for the root's children.
    pub depth: usize,
    pub token: TokenId,
    /// Log-probability of `token` under the stage that produced it.
    pub logprob: f32,
}

/// Speculated continuations. The root is virtual: it stands for the last
/// committed token, which the base model has not consumed yet.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CandidateTree {
    nodes: Vec<TreeNode>,
}

impl CandidateTree {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a node; parents must already exist.
    pub fn push(&mut self, parent: Option<usize>, token: TokenId, logprob: f32) -> Result<usize> {
        let depth = match parent {
            None => 1,
            Some(p) => {
                let pn = self
                    .nodes
                    .get(p)
                    .ok_or_else(|| Error::Range(format!("parent {p} does not exist")))?;
                pn.depth + 1
            }
        };
        self.nodes.push(TreeNode {
            parent,
            depth,
            token,
            logprob,
        });
        Ok(self.nodes.len() - 1)
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    /// Nodes at maximum depth, in insertion order.
    pub fn leaves(&self) -> Vec<usize> {
        let d = self.depth();
        (0..self.nodes.len()).filter(|&i| self.nodes[i].depth == d).collect()
    }

    /// Node indices from depth 1 down to `node`.
    pub fn path(&self, node: usize) -> Vec<usize> {
        let mut path = vec![node];
        while let Some(p) = self.nodes[*path.last().unwrap()].parent {
            path.push(p);
        }
        path.reverse();
        path
    }

    /// Sum of edge log-probabilities from the root down to `node`.
    pub fn path_score(&self, node: usize) -> f32 {
        self.path(node).iter().map(|&i| self.nodes[i].logprob).sum()
    }

    pub fn path_tokens(&self, node: usize) -> Vec<TokenId> {
        self.path(node).iter().map(|&i| self.nodes[i].token).collect()
    }

    /// Drops every node deeper than `depth`.
    pub fn truncated(&self, depth: usize) -> CandidateTree {
        let mut remap = vec![usize::MAX; self.nodes.len()];
        let mut out = CandidateTree::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if n.depth <= depth {
                remap[i] = out.nodes.len();
                out.nodes.push(TreeNode {
                    parent: n.parent.map(|p| remap[p]),
                    ..*n
                });
            }
        }
        out
    }
}

/// One root-to-leaf path kept by pruning.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub leaf: usize,
    pub tokens: Vec<TokenId>,
    pub score: f32,
    /// Flattened-node indices along the path, depth 1 first.
    pub flat_path: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlatNode {
    pub tree_node: usize,
    pub parent: Option<usize>,
    pub depth: usize,
    pub token: TokenId,
}

/// The `k` best candidates, their deduplicated nodes, and the attention mask
/// over `[root, flattened...]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrunedCandidateSet {
    pub k: usize,
    pub candidates: Vec<Candidate>,
    pub flattened: Vec<FlatNode>,
    /// `(1 + flattened.len())` square; row/column 0 is the root.
    pub mask: Vec<Vec<bool>>,
}

impl PrunedCandidateSet {
    pub fn depth(&self) -> usize {
        self.candidates.first().map_or(0, |c| c.tokens.len())
    }

    /// Block positions: the root plus every flattened node.
    pub fn block_len(&self) -> usize {
        1 + self.flattened.len()
    }

    /// Nodes saved by sharing prefixes, relative to `k` separate paths.
    pub fn dedup_savings(&self) -> usize {
        self.k * self.depth() - self.flattened.len()
    }

    /// The verification block. The root sits at `root_pos`; a node at depth
    /// `d` gets position `root_pos + d`, shared by its siblings.
    pub fn block(&self, root_token: TokenId, root_pos: usize) -> Block {
        let mut tokens = vec![root_token];
        let mut positions = vec![root_pos];
        for n in &self.flattened {
            tokens.push(n.token);
            positions.push(root_pos + n.depth);
        }
        Block {
            tokens,
            positions,
            mask: self.mask.clone(),
        }
    }
}

/// Orders leaves by descending path score, then by token path.
fn rank_cmp(a: &(f32, Vec<TokenId>), b: &(f32, Vec<TokenId>)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1))
}

/// Keeps the `k` highest-scoring leaves and flattens their paths.
pub fn prune_to_topk(tree: &CandidateTree, k: usize) -> Result<PrunedCandidateSet> {
    let leaves = tree.leaves();
    if k == 0 || k > leaves.len() {
        return Err(Error::Range(format!(
            "k = {k} but the tree has {} leaves",
            leaves.len()
        )));
    }
    let mut ranked: Vec<(usize, (f32, Vec<TokenId>))> = leaves
        .iter()
        .map(|&l| (l, (tree.path_score(l), tree.path_tokens(l))))
        .collect();
    ranked.sort_by(|a, b| rank_cmp(&a.1, &b.1));
    ranked.truncate(k);

    let mut flat_of: HashMap<usize, usize> = HashMap::new();
    let mut flattened: Vec<FlatNode> = Vec::new();
    let mut candidates = Vec::with_capacity(k);
    for (leaf, (score, tokens)) in ranked {
        let mut flat_path = Vec::with_capacity(tokens.len());
        for node in tree.path(leaf) {
            let idx = *flat_of.entry(node).or_insert_with(|| {
                let n = tree.nodes[node];
                flattened.push(FlatNode {
                    tree_node: node,
                    parent: flat_path.last().copied(),
                    depth: n.depth,
                    token: n.token,
                });
                flattened.len() - 1
            });
            flat_path.push(idx);
        }
        candidates.push(Candidate {
            leaf,
            tokens,
            score,
            flat_path,
        });
    }

    let size = 1 + flattened.len();
    let mut mask = vec![vec![false; size]; size];
    mask[0][0] = true;
    for (f, node) in flattened.iter().enumerate() {
        let row = &mut mask[f + 1];
        row[0] = true;
        row[f + 1] = true;
        let mut p = node.parent;
        while let Some(pi) = p {
            row[pi + 1] = true;
            p = flattened[pi].parent;
        }
    }

    Ok(PrunedCandidateSet {
        k,
        candidates,
        flattened,
        mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// A full tree with the given branching and random normalised scores.
    fn random_tree(branching: &[usize], seed: u64) -> CandidateTree {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tree = CandidateTree::new();
        let mut frontier: Vec<Option<usize>> = vec![None];
        for &b in branching {
            let mut next = Vec::new();
            for parent in frontier {
                let mut toks: Vec<TokenId> = (0..20).collect();
                for i in 0..b {
                    let j = rng.gen_range(i..toks.len());
                    toks.swap(i, j);
                }
                for &tok in &toks[..b] {
                    // Coarse scores so ties actually happen.
                    let lp = -(rng.gen_range(0..4) as f32) * 0.5;
                    next.push(Some(tree.push(parent, tok, lp).unwrap()));
                }
            }
            frontier = next;
        }
        tree
    }

    #[test]
    fn full_k_keeps_everything() {
        let tree = random_tree(&[3, 2, 2], 1);
        let p = prune_to_topk(&tree, 12).unwrap();
        assert_eq!(p.candidates.len(), 12);
        assert_eq!(p.flattened.len(), tree.len());
    }

    #[test]
    fn shared_prefix_is_deduplicated() {
        let mut tree = CandidateTree::new();
        let a = tree.push(None, 5, -0.1).unwrap();
        let b = tree.push(Some(a), 6, -0.1).unwrap();
        tree.push(Some(b), 7, -0.1).unwrap();
        let c = tree.push(Some(a), 8, -0.2).unwrap();
        tree.push(Some(c), 9, -0.2).unwrap();
        let p = prune_to_topk(&tree, 2).unwrap();
        assert_eq!(p.flattened.len(), 2 * 3 - 1);
        assert_eq!(p.dedup_savings(), 1);
        // Second candidate's first node is shared with the first.
        assert_eq!(p.candidates[0].flat_path[0], p.candidates[1].flat_path[0]);
    }

    #[test]
    fn k_out_of_range() {
        let tree = random_tree(&[2, 2], 2);
        assert!(matches!(prune_to_topk(&tree, 0), Err(Error::Range(_))));
        assert!(matches!(prune_to_topk(&tree, 5), Err(Error::Range(_))));
    }

    #[test]
    fn selection_matches_full_sort() {
        for seed in 0..200 {
            let tree = random_tree(&[4, 3, 2], seed);
            let k = 1 + (seed as usize % 24);
            let pruned = prune_to_topk(&tree, k).unwrap();

            // Oracle: enumerate leaves, score by walking parents, sort.
            let mut all: Vec<(f32, Vec<TokenId>)> = Vec::new();
            for (i, n) in tree.nodes().iter().enumerate() {
                if n.depth != 3 {
                    continue;
                }
                let mut score = 0.0f32;
                let mut toks = Vec::new();
                let mut cur = Some(i);
                let mut chain = Vec::new();
                while let Some(c) = cur {
                    chain.push(c);
                    cur = tree.nodes()[c].parent;
                }
                for &c in chain.iter().rev() {
                    score += tree.nodes()[c].logprob;
                    toks.push(tree.nodes()[c].token);
                }
                all.push((score, toks));
            }
            all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let want: Vec<Vec<TokenId>> = all.into_iter().take(k).map(|x| x.1).collect();
            let got: Vec<Vec<TokenId>> = pruned.candidates.iter().map(|c| c.tokens.clone()).collect();
            assert_eq!(got, want, "seed {seed}");
        }
    }

    proptest! {
        #[test]
        fn pruning_is_nested(seed in 0u64..500, k in 1usize..23) {
            let tree = random_tree(&[4, 3, 2], seed);
            let small = prune_to_topk(&tree, k).unwrap();
            let big = prune_to_topk(&tree, k + 1).unwrap();
            let leaves: Vec<usize> = big.candidates.iter().map(|c| c.leaf).collect();
            for c in &small.candidates {
                prop_assert!(leaves.contains(&c.leaf));
            }
            prop_assert_eq!(&big.candidates[..k], &small.candidates[..]);
        }

        #[test]
        fn mask_is_ancestor_closure(seed in 0u64..200, k in 1usize..13) {
            let tree = random_tree(&[3, 2, 2], seed);
            let p = prune_to_topk(&tree, k).unwrap();
            for (f, node) in p.flattened.iter().enumerate() {
                let mut allowed = vec![0usize, f + 1];
                let mut cur = node.parent;
                while let Some(c) = cur {
                    allowed.push(c + 1);
                    cur = p.flattened[c].parent;
                }
                for j in 0..p.block_len() {
                    prop_assert_eq!(p.mask[f + 1][j], allowed.contains(&j));
                }
                if let Some(par) = node.parent {
                    prop_assert!(par < f);
                    prop_assert_eq!(p.flattened[par].depth + 1, node.depth);
                }
            }
            // Path scores are sums of log-probabilities, never positive.
            prop_assert!(p.candidates.iter().all(|c| c.score <= 0.0));
        }
    }

    #[test]
    fn truncation_keeps_structure() {
        let tree = random_tree(&[3, 2, 2], 5);
        let t2 = tree.truncated(2);
        assert_eq!(t2.depth(), 2);
        assert_eq!(t2.leaves().len(), 6);
        for n in t2.nodes() {
            if let Some(p) = n.parent {
                assert_eq!(t2.nodes()[p].depth + 1, n.depth);
            }
        }
    }
}
