//! Token layout for the neural decoder: the syndrome as a two-channel grid,
//! the per-edge stencil of incident checks, and the attention mask.

use std::sync::Arc;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::lattice::{Syndrome, ToricCode};

/// Additive attention-mask value for forbidden pairs. Finite so softmax rows
/// never produce NaN, yet far below any reachable score.
pub const MASK_OFF: f64 = -1e30;

/// Syndrome bits arranged as two L x L channels: channel 0 holds star-check
/// outcomes, channel 1 plaquette-check outcomes, both indexed by (row, col).
pub struct SyndromeGrid {
    l: usize,
    star: Array2<f64>,
    plaquette: Array2<f64>,
}

impl SyndromeGrid {
    pub fn from_syndrome(code: &ToricCode, syndrome: &Syndrome) -> Result<Self> {
        if syndrome.len() != code.m() {
            return Err(Error::config(format!(
                "syndrome has {} bits but the code measures {} checks",
                syndrome.len(),
                code.m()
            )));
        }
        let l = code.l();
        let bit = |id: usize| syndrome.bits().get(id) as u8 as f64;
        let star = Array2::from_shape_fn((l, l), |(r, c)| bit(code.star_check(r, c)));
        let plaquette = Array2::from_shape_fn((l, l), |(r, c)| bit(code.plaquette_check(r, c)));
        Ok(SyndromeGrid { l, star, plaquette })
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn star(&self) -> &Array2<f64> {
        &self.star
    }

    pub fn plaquette(&self) -> &Array2<f64> {
        &self.plaquette
    }

    /// Flattens back to check-index order: a 1 x m row holding all star
    /// outcomes followed by all plaquette outcomes.
    pub fn to_row(&self) -> Array2<f64> {
        let l = self.l;
        Array2::from_shape_fn((1, 2 * l * l), |(_, j)| {
            if j < l * l {
                self.star[[j / l, j % l]]
            } else {
                let j = j - l * l;
                self.plaquette[[j / l, j % l]]
            }
        })
    }

    pub fn to_syndrome(&self) -> Syndrome {
        let l = self.l;
        let mut bits = crate::bits::BitVec::zeros(2 * l * l);
        for r in 0..l {
            for c in 0..l {
                if self.star[[r, c]] != 0.0 {
                    bits.set(r * l + c, true);
                }
                if self.plaquette[[r, c]] != 0.0 {
                    bits.set(l * l + r * l + c, true);
                }
            }
        }
        Syndrome::new(bits)
    }
}

/// One token per data qubit: the token's stencil is the 4 checks incident to
/// its edge, and two tokens may attend to each other exactly when their
/// stencils share a check.
pub struct TokenLayout {
    l: usize,
    tokens: usize,
    /// Flattened tokens x 4 table of check ids, in [star, star, plaquette,
    /// plaquette] order per token.
    incident: Arc<Vec<usize>>,
    allowed: Array2<bool>,
    mask: Arc<Array2<f64>>,
}

impl TokenLayout {
    pub fn new(code: &ToricCode) -> Self {
        let tokens = code.n();
        let mut incident = Vec::with_capacity(tokens * 4);
        for edge in 0..tokens {
            incident.extend_from_slice(&code.incident_checks(edge));
        }
        // Two edges share a check iff some check lists both; walking checks
        // once marks every allowed pair, including each edge with itself.
        let mut allowed = Array2::from_elem((tokens, tokens), false);
        for check in 0..code.m() {
            let edges = code.check_edges(check);
            for &a in &edges {
                for &b in &edges {
                    allowed[[a, b]] = true;
                }
            }
        }
        let mask = Array2::from_shape_fn((tokens, tokens), |(i, j)| {
            if allowed[[i, j]] {
                0.0
            } else {
                MASK_OFF
            }
        });
        TokenLayout { l: code.l(), tokens, incident: Arc::new(incident), allowed, mask: Arc::new(mask) }
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    /// Check ids incident to a token's edge.
    pub fn incident_checks(&self, token: usize) -> &[usize] {
        &self.incident[token * 4..token * 4 + 4]
    }

    pub fn incident_table(&self) -> &Arc<Vec<usize>> {
        &self.incident
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allowed[[i, j]]
    }

    /// Additive attention mask: 0 on allowed pairs, [`MASK_OFF`] elsewhere.
    pub fn mask(&self) -> &Arc<Array2<f64>> {
        &self.mask
    }

    pub fn row_weight(&self, i: usize) -> usize {
        (0..self.tokens).filter(|&j| self.allowed[[i, j]]).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{EdgeCoord, PauliError};
    use crate::noise::DepolarizingChannel;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grid_roundtrips_random_syndromes() {
        let code = ToricCode::new(4).unwrap();
        let channel = DepolarizingChannel::new(0.15).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for _ in 0..50 {
            let err = channel.sample(&code, &mut rng);
            let syndrome = code.syndrome_of(&err);
            let grid = SyndromeGrid::from_syndrome(&code, &syndrome).unwrap();
            assert_eq!(grid.to_syndrome(), syndrome);
            let row = grid.to_row();
            for j in 0..code.m() {
                assert_eq!(row[[0, j]] != 0.0, syndrome.bits().get(j));
            }
        }
    }

    #[test]
    fn grid_rejects_wrong_length() {
        let code = ToricCode::new(4).unwrap();
        let syndrome = Syndrome::zeros(10);
        assert!(SyndromeGrid::from_syndrome(&code, &syndrome).is_err());
    }

    #[test]
    fn translated_errors_translate_both_grid_channels() {
        let code = ToricCode::new(4).unwrap();
        let l = 4;
        let channel = DepolarizingChannel::new(0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..20 {
            let err = channel.sample(&code, &mut rng);
            let (dr, dc) = (1 + trial % l, 2 + trial % l);
            let mut shifted = PauliError::identity(code.n());
            for edge in 0..code.n() {
                let EdgeCoord { kind, row, col } = code.edge_coord(edge);
                let moved = code.edge_id(EdgeCoord {
                    kind,
                    row: (row + dr) % l,
                    col: (col + dc) % l,
                });
                if err.z_bit(edge) {
                    shifted.flip_z(moved);
                }
                if err.x_bit(edge) {
                    shifted.flip_x(moved);
                }
            }
            let g0 = SyndromeGrid::from_syndrome(&code, &code.syndrome_of(&err)).unwrap();
            let g1 = SyndromeGrid::from_syndrome(&code, &code.syndrome_of(&shifted)).unwrap();
            for r in 0..l {
                for c in 0..l {
                    assert_eq!(g0.star()[[r, c]], g1.star()[[(r + dr) % l, (c + dc) % l]]);
                    assert_eq!(
                        g0.plaquette()[[r, c]],
                        g1.plaquette()[[(r + dr) % l, (c + dc) % l]]
                    );
                }
            }
        }
    }

    #[test]
    fn every_token_has_two_stars_and_two_plaquettes() {
        for l in [4usize, 6] {
            let code = ToricCode::new(l).unwrap();
            let layout = TokenLayout::new(&code);
            assert_eq!(layout.tokens(), 2 * l * l);
            for t in 0..layout.tokens() {
                let checks = layout.incident_checks(t);
                assert_eq!(checks.len(), 4);
                assert_eq!(checks.iter().filter(|&&c| c < l * l).count(), 2);
                assert_eq!(checks.iter().filter(|&&c| c >= l * l).count(), 2);
            }
        }
    }

    #[test]
    fn mask_matches_pairwise_stencil_intersection() {
        // Independent oracle: compare the check-walk construction against a
        // direct pairwise intersection of incident-check sets.
        for l in [4usize, 6, 8] {
            let code = ToricCode::new(l).unwrap();
            let layout = TokenLayout::new(&code);
            for i in 0..layout.tokens() {
                let ci = code.incident_checks(i);
                for j in 0..layout.tokens() {
                    let cj = code.incident_checks(j);
                    let share = ci.iter().any(|a| cj.contains(a));
                    assert_eq!(
                        layout.allows(i, j),
                        share,
                        "L={l} tokens {i},{j} disagree with the stencil oracle"
                    );
                    let mv = layout.mask()[[i, j]];
                    assert_eq!(mv == 0.0, share);
                    assert_eq!(mv == MASK_OFF, !share);
                }
            }
        }
    }

    #[test]
    fn mask_is_symmetric_with_allowed_diagonal_and_uniform_rows() {
        for l in [4usize, 6, 8] {
            let code = ToricCode::new(l).unwrap();
            let layout = TokenLayout::new(&code);
            let w0 = layout.row_weight(0);
            for i in 0..layout.tokens() {
                assert!(layout.allows(i, i));
                assert_eq!(layout.row_weight(i), w0, "L={l} row {i}");
                for j in 0..layout.tokens() {
                    assert_eq!(layout.allows(i, j), layout.allows(j, i));
                }
            }
            assert_eq!(w0, 9, "L={l}: an edge neighbors itself plus 8 others");
        }
    }

    #[test]
    fn incident_table_mirrors_the_code() {
        let code = ToricCode::new(6).unwrap();
        let layout = TokenLayout::new(&code);
        for edge in 0..code.n() {
            assert_eq!(layout.incident_checks(edge), code.incident_checks(edge));
        }
    }
}
