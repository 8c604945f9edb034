//! Mean-of-embeddings next-item model.
//!
//! A POI is represented by its own embedding plus its category's embedding;
//! the context is the mean representation of the last `w` inputs. Scores are
//! dot products with candidate representations plus biases. POI scores also
//! carry the category bias, so semantic distillation moves POI rankings too.

use std::ops::Range;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{score_grad, score_hessian, LocalModel, LossTerm, SeqInput, TargetVocab};
use crate::corpus::{CatId, PoiIdx, RegionMap};
use crate::linalg::{self, dot};
use crate::seed;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbedMeanConfig {
    pub dim: usize,
    pub window: usize,
    pub init_scale: f64,
}

impl Default for EmbedMeanConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            window: 10,
            init_scale: 0.05,
        }
    }
}

/// Parameter layout: `[E_poi | E_cat | b_poi | b_cat]`, with local POIs
/// grouped by region in ascending region order.
#[derive(Debug, Clone)]
pub struct EmbedMeanModel {
    cfg: EmbedMeanConfig,
    regions: Arc<RegionMap>,
    poi_cats: Arc<Vec<CatId>>,
    num_categories: usize,
    local_regions: Vec<u32>,
    region_offset: Vec<Option<usize>>,
    num_local: usize,
    theta: Vec<f64>,
}

struct Scratch {
    h: Vec<f64>,
    hc: Vec<f64>,
    scores: Vec<f64>,
    gs: Vec<f64>,
    gh: Vec<f64>,
    gcat: Vec<f64>,
}

impl EmbedMeanModel {
    /// Zero-initialized model covering `local_regions`.
    pub fn new(
        cfg: EmbedMeanConfig,
        regions: Arc<RegionMap>,
        poi_cats: Arc<Vec<CatId>>,
        num_categories: usize,
        local_regions: &[u32],
    ) -> Result<Self> {
        if cfg.dim == 0 || cfg.window == 0 {
            return Err(Error::Param("embedding dim and window must be positive".into()));
        }
        let mut local: Vec<u32> = local_regions.to_vec();
        local.sort_unstable();
        local.dedup();
        let mut region_offset = vec![None; regions.k];
        let mut num_local = 0;
        for &r in &local {
            if r as usize >= regions.k {
                return Err(Error::Vocab { kind: "region", item: r });
            }
            region_offset[r as usize] = Some(num_local);
            num_local += regions.members(r).len();
        }
        let n = num_local * cfg.dim + num_categories * cfg.dim + num_local + num_categories;
        Ok(Self {
            cfg,
            regions,
            poi_cats,
            num_categories,
            local_regions: local,
            region_offset,
            num_local,
            theta: vec![0.0; n],
        })
    }

    /// Uniform `[-init_scale, init_scale]` embeddings, zero biases.
    pub fn init_random(&mut self, seed: u64) {
        let mut rng = seed::rng_for(seed, "embed-init", 0);
        let s = self.cfg.init_scale;
        let end = self.b_poi_off();
        for x in &mut self.theta[..end] {
            *x = rng.gen_range(-s..=s);
        }
        for x in &mut self.theta[end..] {
            *x = 0.0;
        }
    }

    pub fn config(&self) -> EmbedMeanConfig {
        self.cfg
    }

    pub fn local_regions(&self) -> &[u32] {
        &self.local_regions
    }

    pub fn num_categories(&self) -> usize {
        self.num_categories
    }

    pub fn covers_region(&self, r: u32) -> bool {
        self.region_offset.get(r as usize).is_some_and(Option::is_some)
    }

    fn e_cat_off(&self) -> usize {
        self.num_local * self.cfg.dim
    }

    fn b_poi_off(&self) -> usize {
        self.e_cat_off() + self.num_categories * self.cfg.dim
    }

    fn b_cat_off(&self) -> usize {
        self.b_poi_off() + self.num_local
    }

    fn local_of(&self, p: PoiIdx) -> Result<usize> {
        if p as usize >= self.regions.num_pois() {
            return Err(Error::Vocab { kind: "poi", item: p });
        }
        match self.region_offset[self.regions.region_of(p) as usize] {
            Some(off) => Ok(off + self.regions.position(p)),
            None => Err(Error::Vocab { kind: "poi", item: p }),
        }
    }

    fn check_cat(&self, c: CatId) -> Result<usize> {
        if (c as usize) < self.num_categories {
            Ok(c as usize)
        } else {
            Err(Error::Vocab { kind: "category", item: c })
        }
    }

    fn region_block(&self, r: u32) -> Result<(usize, &[PoiIdx])> {
        match self.region_offset.get(r as usize).copied().flatten() {
            Some(off) => Ok((off, self.regions.members(r))),
            None => Err(Error::Vocab { kind: "region", item: r }),
        }
    }

    fn scratch(&self) -> Scratch {
        let d = self.cfg.dim;
        Scratch {
            h: vec![0.0; d],
            hc: vec![0.0; self.num_categories],
            scores: Vec::new(),
            gs: Vec::new(),
            gh: vec![0.0; d],
            gcat: vec![0.0; self.num_categories],
        }
    }

    fn window<'a>(&self, input: SeqInput<'a>) -> Result<SeqInput<'a>> {
        let w = self.cfg.window;
        Ok(match input {
            SeqInput::Pois(s) if !s.is_empty() => SeqInput::Pois(&s[s.len().saturating_sub(w)..]),
            SeqInput::Cats(s) if !s.is_empty() => SeqInput::Cats(&s[s.len().saturating_sub(w)..]),
            _ => return Err(Error::Contract("empty input sequence".into())),
        })
    }

    fn context(&self, theta: &[f64], input: SeqInput, h: &mut [f64]) -> Result<()> {
        let d = self.cfg.dim;
        let ec = self.e_cat_off();
        h.fill(0.0);
        let inv = 1.0 / input.len() as f64;
        match input {
            SeqInput::Pois(s) => {
                for &p in s {
                    let lp = self.local_of(p)?;
                    let c = self.poi_cats[p as usize] as usize;
                    linalg::axpy(inv, &theta[lp * d..(lp + 1) * d], h);
                    linalg::axpy(inv, &theta[ec + c * d..ec + (c + 1) * d], h);
                }
            }
            SeqInput::Cats(s) => {
                for &c in s {
                    let c = self.check_cat(c)?;
                    linalg::axpy(inv, &theta[ec + c * d..ec + (c + 1) * d], h);
                }
            }
        }
        Ok(())
    }

    fn scores_into(&self, theta: &[f64], vocab: TargetVocab, sc: &mut Scratch) -> Result<()> {
        let d = self.cfg.dim;
        let ec = self.e_cat_off();
        let bc = self.b_cat_off();
        for c in 0..self.num_categories {
            sc.hc[c] = dot(&sc.h, &theta[ec + c * d..ec + (c + 1) * d]);
        }
        sc.scores.clear();
        match vocab {
            TargetVocab::Categories => {
                sc.scores.extend((0..self.num_categories).map(|c| sc.hc[c] + theta[bc + c]));
            }
            TargetVocab::Region(r) => {
                let (off, members) = self.region_block(r)?;
                let bp = self.b_poi_off();
                for (i, &p) in members.iter().enumerate() {
                    let lp = off + i;
                    let c = self.poi_cats[p as usize] as usize;
                    sc.scores.push(dot(&sc.h, &theta[lp * d..(lp + 1) * d]) + sc.hc[c] + theta[bp + lp] + theta[bc + c]);
                }
            }
        }
        Ok(())
    }

    fn target_pos(&self, vocab: TargetVocab, target: u32) -> Result<usize> {
        match vocab {
            TargetVocab::Categories => self.check_cat(target),
            TargetVocab::Region(r) => {
                if target as usize >= self.regions.num_pois() || self.regions.region_of(target) != r {
                    return Err(Error::Vocab { kind: "poi", item: target });
                }
                self.region_block(r)?;
                Ok(self.regions.position(target))
            }
        }
    }

    fn check_target_dim(&self, vocab: TargetVocab, n: usize) -> Result<()> {
        let m = self.vocab_size(vocab)?;
        if m != n {
            return Err(Error::Contract(format!("distillation target has {n} entries, vocabulary has {m}")));
        }
        Ok(())
    }

    /// Forward pass of one term into `sc`; returns (input, vocab, target position).
    fn prepare<'a>(
        &self,
        theta: &[f64],
        term: &LossTerm<'a>,
        sc: &mut Scratch,
    ) -> Result<(SeqInput<'a>, TargetVocab, Option<usize>)> {
        let (input, vocab, tpos) = match *term {
            LossTerm::NextItem { context, vocab, target, .. } => (context, vocab, Some(self.target_pos(vocab, target)?)),
            LossTerm::Distill { input, vocab, target, .. } => {
                self.check_target_dim(vocab, target.mean.len())?;
                (input, vocab, None)
            }
        };
        let input = self.window(input)?;
        self.context(theta, input, &mut sc.h)?;
        self.scores_into(theta, vocab, sc)?;
        linalg::softmax_in_place(&mut sc.scores);
        Ok((input, vocab, tpos))
    }
}

impl LocalModel for EmbedMeanModel {
    fn params(&self) -> &[f64] {
        &self.theta
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    fn vocab_size(&self, vocab: TargetVocab) -> Result<usize> {
        match vocab {
            TargetVocab::Categories => Ok(self.num_categories),
            TargetVocab::Region(r) => Ok(self.region_block(r)?.1.len()),
        }
    }

    fn scores_with(&self, theta: &[f64], input: SeqInput, vocab: TargetVocab) -> Result<Vec<f64>> {
        let mut sc = self.scratch();
        let input = self.window(input)?;
        self.context(theta, input, &mut sc.h)?;
        self.scores_into(theta, vocab, &mut sc)?;
        Ok(sc.scores)
    }

    fn objective_with(&self, theta: &[f64], terms: &[LossTerm], mut grad: Option<&mut [f64]>) -> Result<f64> {
        if theta.len() != self.theta.len() {
            return Err(Error::Contract(format!("expected {} parameters, got {}", self.theta.len(), theta.len())));
        }
        let d = self.cfg.dim;
        let (ec, bp, bc) = (self.e_cat_off(), self.b_poi_off(), self.b_cat_off());
        let mut sc = self.scratch();
        let mut total = 0.0;
        for term in terms {
            let weight = term.weight();
            let (input, vocab, tpos) = self.prepare(theta, term, &mut sc)?;
            sc.gs.resize(sc.scores.len(), 0.0);
            total += weight * score_grad(term, &sc.scores, tpos, &mut sc.gs);
            let Some(g) = grad.as_deref_mut() else { continue };
            for x in &mut sc.gs {
                *x *= weight;
            }
            sc.gh.fill(0.0);
            sc.gcat.fill(0.0);
            match vocab {
                TargetVocab::Categories => {
                    for c in 0..self.num_categories {
                        sc.gcat[c] += sc.gs[c];
                    }
                }
                TargetVocab::Region(r) => {
                    let (off, members) = self.region_block(r)?;
                    for (i, &p) in members.iter().enumerate() {
                        let lp = off + i;
                        let gv = sc.gs[i];
                        let c = self.poi_cats[p as usize] as usize;
                        linalg::axpy(gv, &theta[lp * d..(lp + 1) * d], &mut sc.gh);
                        linalg::axpy(gv, &sc.h, &mut g[lp * d..(lp + 1) * d]);
                        g[bp + lp] += gv;
                        sc.gcat[c] += gv;
                    }
                }
            }
            for c in 0..self.num_categories {
                let gc = sc.gcat[c];
                if gc != 0.0 {
                    linalg::axpy(gc, &theta[ec + c * d..ec + (c + 1) * d], &mut sc.gh);
                    linalg::axpy(gc, &sc.h, &mut g[ec + c * d..ec + (c + 1) * d]);
                    g[bc + c] += gc;
                }
            }
            let inv = 1.0 / input.len() as f64;
            match input {
                SeqInput::Pois(s) => {
                    for &p in s {
                        let lp = self.local_of(p)?;
                        let c = self.poi_cats[p as usize] as usize;
                        linalg::axpy(inv, &sc.gh, &mut g[lp * d..(lp + 1) * d]);
                        linalg::axpy(inv, &sc.gh, &mut g[ec + c * d..ec + (c + 1) * d]);
                    }
                }
                SeqInput::Cats(s) => {
                    for &c in s {
                        let c = c as usize;
                        linalg::axpy(inv, &sc.gh, &mut g[ec + c * d..ec + (c + 1) * d]);
                    }
                }
            }
        }
        Ok(total)
    }

    fn head_range(&self) -> Range<usize> {
        self.b_poi_off()..self.theta.len()
    }

    fn head_hessian_with(&self, theta: &[f64], terms: &[LossTerm]) -> Option<Result<DMatrix<f64>>> {
        Some(self.bias_hessian(theta, terms))
    }
}

impl EmbedMeanModel {
    /// Exact Hessian over `[b_poi | b_cat]`: the score Hessian pulled back
    /// through the bias incidence (each POI score has one POI bias and one
    /// category bias).
    fn bias_hessian(&self, theta: &[f64], terms: &[LossTerm]) -> Result<DMatrix<f64>> {
        let n = self.num_local + self.num_categories;
        let mut out = DMatrix::zeros(n, n);
        let mut sc = self.scratch();
        let mut hs = Vec::new();
        let mut idx: Vec<[usize; 2]> = Vec::new();
        for term in terms {
            let (_, vocab, _) = self.prepare(theta, term, &mut sc)?;
            score_hessian(term, &sc.scores, &mut hs);
            let w = term.weight();
            let v = sc.scores.len();
            idx.clear();
            match vocab {
                TargetVocab::Categories => idx.extend((0..v).map(|c| [self.num_local + c, usize::MAX])),
                TargetVocab::Region(r) => {
                    let (off, members) = self.region_block(r)?;
                    idx.extend(
                        members
                            .iter()
                            .enumerate()
                            .map(|(i, &p)| [off + i, self.num_local + self.poi_cats[p as usize] as usize]),
                    );
                }
            }
            for a in 0..v {
                for b in 0..v {
                    let x = w * hs[a * v + b];
                    if x == 0.0 {
                        continue;
                    }
                    for &ia in idx[a].iter().filter(|&&i| i != usize::MAX) {
                        for &ib in idx[b].iter().filter(|&&i| i != usize::MAX) {
                            out[(ia, ib)] += x;
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}
