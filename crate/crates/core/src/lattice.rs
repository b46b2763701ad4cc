//! Toric code on an L x L periodic lattice.
//!
//! Qubits sit on edges, X-type checks on vertices (stars), Z-type checks on
//! faces (plaquettes). A Pauli error is a binary symplectic vector (z|x) of
//! length 2n; a check fires iff its row anticommutes with the error, which is
//! a GF(2) dot product after swapping the halves of one operand.
//!
//! Index layout, fixed for all consumers (file formats, token order, tests):
//! horizontal edge (r,c) -> r*L + c, vertical edge (r,c) -> L^2 + r*L + c;
//! star (r,c) -> r*L + c, plaquette (r,c) -> L^2 + r*L + c. The horizontal
//! edge (r,c) leaves vertex (r,c) rightward, the vertical edge (r,c) leaves it
//! downward, and plaquette (r,c) is the face whose top-left corner is (r,c).

use crate::bits::BitVec;
use crate::error::{Error, Result};
use crate::gf2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EdgeKind {
    Horizontal,
    Vertical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EdgeCoord {
    pub kind: EdgeKind,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CheckKind {
    Star,
    Plaquette,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CheckCoord {
    pub kind: CheckKind,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pauli {
    I,
    X,
    Y,
    Z,
}

/// Pauli error in binary symplectic form: bits [0,n) are the Z part, bits
/// [n,2n) the X part.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PauliError {
    n: usize,
    bits: BitVec,
}

impl PauliError {
    pub fn identity(n: usize) -> Self {
        PauliError { n, bits: BitVec::zeros(2 * n) }
    }

    pub fn from_bits(bits: BitVec) -> Result<Self> {
        if bits.len() % 2 != 0 {
            return Err(Error::config(format!(
                "symplectic vector length {} is odd",
                bits.len()
            )));
        }
        Ok(PauliError { n: bits.len() / 2, bits })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn bits(&self) -> &BitVec {
        &self.bits
    }

    pub fn z_bit(&self, edge: usize) -> bool {
        self.bits.get(edge)
    }

    pub fn x_bit(&self, edge: usize) -> bool {
        self.bits.get(self.n + edge)
    }

    pub fn set_z(&mut self, edge: usize, v: bool) {
        self.bits.set(edge, v);
    }

    pub fn set_x(&mut self, edge: usize, v: bool) {
        self.bits.set(self.n + edge, v);
    }

    pub fn flip_z(&mut self, edge: usize) {
        self.bits.flip(edge);
    }

    pub fn flip_x(&mut self, edge: usize) {
        self.bits.flip(self.n + edge);
    }

    pub fn pauli_on(&self, edge: usize) -> Pauli {
        match (self.x_bit(edge), self.z_bit(edge)) {
            (false, false) => Pauli::I,
            (true, false) => Pauli::X,
            (true, true) => Pauli::Y,
            (false, true) => Pauli::Z,
        }
    }

    pub fn apply(&mut self, edge: usize, p: Pauli) {
        match p {
            Pauli::I => {}
            Pauli::X => self.flip_x(edge),
            Pauli::Z => self.flip_z(edge),
            Pauli::Y => {
                self.flip_x(edge);
                self.flip_z(edge);
            }
        }
    }

    pub fn xor_assign(&mut self, other: &PauliError) {
        self.bits.xor_assign(&other.bits);
    }

    /// Number of qubits acted on non-trivially.
    pub fn qubit_weight(&self) -> usize {
        (0..self.n).filter(|&e| self.x_bit(e) || self.z_bit(e)).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Syndrome {
    bits: BitVec,
}

impl Syndrome {
    pub fn new(bits: BitVec) -> Self {
        Syndrome { bits }
    }

    pub fn zeros(m: usize) -> Self {
        Syndrome { bits: BitVec::zeros(m) }
    }

    pub fn bits(&self) -> &BitVec {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn is_trivial(&self) -> bool {
        self.bits.is_zero()
    }

    pub fn defects(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.ones()
    }
}

/// Swaps the (z|x) halves of a symplectic vector, giving (x|z).
pub fn swap_halves(v: &BitVec) -> Result<BitVec> {
    if v.len() % 2 != 0 {
        return Err(Error::config(format!("symplectic vector length {} is odd", v.len())));
    }
    let n = v.len() / 2;
    let mut out = BitVec::zeros(v.len());
    for i in v.ones() {
        out.set(if i < n { i + n } else { i - n }, true);
    }
    Ok(out)
}

/// Binary symplectic product (a.z . b.x) xor (a.x . b.z). True means the two
/// Pauli operators anticommute.
pub fn symplectic_product(a: &BitVec, b: &BitVec) -> Result<bool> {
    if a.len() != b.len() {
        return Err(Error::config(format!(
            "symplectic product of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.dot(&swap_halves(b)?))
}

#[derive(Clone)]
pub struct ToricCode {
    l: usize,
    n: usize,
    m: usize,
    k: usize,
    /// Check matrix rows in (z|x) form: stars first, then plaquettes.
    h: Vec<BitVec>,
    /// H rows with halves swapped, so a syndrome bit is a plain dot product.
    h_swapped: Vec<BitVec>,
    /// Logical operator rows in (z|x) form, ordered [X1, X2, Z1, Z2].
    logicals: Vec<BitVec>,
    logicals_swapped: Vec<BitVec>,
}

pub fn build_toric_code(l: usize) -> Result<ToricCode> {
    ToricCode::new(l)
}

impl ToricCode {
    pub fn new(l: usize) -> Result<Self> {
        if l < 2 || l > 64 {
            return Err(Error::config(format!("lattice size L={l} outside supported range [2, 64]")));
        }
        if l % 2 != 0 {
            return Err(Error::config(format!("lattice size L={l} must be even")));
        }
        let n = 2 * l * l;
        let m = 2 * l * l;
        let mut code = ToricCode {
            l,
            n,
            m,
            k: 2,
            h: Vec::with_capacity(m),
            h_swapped: Vec::with_capacity(m),
            logicals: Vec::with_capacity(4),
            logicals_swapped: Vec::with_capacity(4),
        };

        for check in 0..m {
            let mut row = BitVec::zeros(2 * n);
            let edges = code.check_edges(check);
            let is_star = check < l * l;
            for e in edges {
                // Stars are X-type (x half), plaquettes Z-type (z half).
                row.set(if is_star { n + e } else { e }, true);
            }
            debug_assert_eq!(row.weight(), 4);
            code.h_swapped.push(swap_halves(&row)?);
            code.h.push(row);
        }

        // Minimum-weight representatives of the four logical classes. The
        // X-type logicals run along homologically nontrivial dual-lattice
        // loops, the Z-type ones along primal loops.
        let x1: Vec<usize> = (0..l).map(|r| n + code.horizontal_edge(r, 0)).collect();
        let x2: Vec<usize> = (0..l).map(|c| n + code.vertical_edge(0, c)).collect();
        let z1: Vec<usize> = (0..l).map(|c| code.horizontal_edge(0, c)).collect();
        let z2: Vec<usize> = (0..l).map(|r| code.vertical_edge(r, 0)).collect();
        for support in [x1, x2, z1, z2] {
            let row = BitVec::from_indices(2 * n, &support);
            code.logicals_swapped.push(swap_halves(&row)?);
            code.logicals.push(row);
        }

        Ok(code)
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn h_rows(&self) -> &[BitVec] {
        &self.h
    }

    pub fn logical_rows(&self) -> &[BitVec] {
        &self.logicals
    }

    /// Swapped supports of the logical rows: the bit positions of the error
    /// vector whose parity gives each logical-effect bit.
    pub fn logical_swapped_support(&self, i: usize) -> Vec<usize> {
        self.logicals_swapped[i].ones().collect()
    }

    pub fn horizontal_edge(&self, r: usize, c: usize) -> usize {
        debug_assert!(r < self.l && c < self.l);
        r * self.l + c
    }

    pub fn vertical_edge(&self, r: usize, c: usize) -> usize {
        debug_assert!(r < self.l && c < self.l);
        self.l * self.l + r * self.l + c
    }

    pub fn star_check(&self, r: usize, c: usize) -> usize {
        debug_assert!(r < self.l && c < self.l);
        r * self.l + c
    }

    pub fn plaquette_check(&self, r: usize, c: usize) -> usize {
        debug_assert!(r < self.l && c < self.l);
        self.l * self.l + r * self.l + c
    }

    pub fn edge_id(&self, coord: EdgeCoord) -> usize {
        match coord.kind {
            EdgeKind::Horizontal => self.horizontal_edge(coord.row, coord.col),
            EdgeKind::Vertical => self.vertical_edge(coord.row, coord.col),
        }
    }

    pub fn edge_coord(&self, edge: usize) -> EdgeCoord {
        assert!(edge < self.n, "edge id {edge} out of range for n={}", self.n);
        let half = self.l * self.l;
        let (kind, rest) = if edge < half {
            (EdgeKind::Horizontal, edge)
        } else {
            (EdgeKind::Vertical, edge - half)
        };
        EdgeCoord { kind, row: rest / self.l, col: rest % self.l }
    }

    pub fn check_id(&self, coord: CheckCoord) -> usize {
        match coord.kind {
            CheckKind::Star => self.star_check(coord.row, coord.col),
            CheckKind::Plaquette => self.plaquette_check(coord.row, coord.col),
        }
    }

    pub fn check_coord(&self, check: usize) -> CheckCoord {
        assert!(check < self.m, "check id {check} out of range for m={}", self.m);
        let half = self.l * self.l;
        let (kind, rest) = if check < half {
            (CheckKind::Star, check)
        } else {
            (CheckKind::Plaquette, check - half)
        };
        CheckCoord { kind, row: rest / self.l, col: rest % self.l }
    }

    /// The four edges touching a check. Stars: the edges incident to the
    /// vertex; plaquettes: the boundary of the face.
    pub fn check_edges(&self, check: usize) -> [usize; 4] {
        let l = self.l;
        let c = self.check_coord(check);
        let (r, col) = (c.row, c.col);
        match c.kind {
            CheckKind::Star => [
                self.horizontal_edge(r, col),
                self.horizontal_edge(r, (col + l - 1) % l),
                self.vertical_edge(r, col),
                self.vertical_edge((r + l - 1) % l, col),
            ],
            CheckKind::Plaquette => [
                self.horizontal_edge(r, col),
                self.horizontal_edge((r + 1) % l, col),
                self.vertical_edge(r, col),
                self.vertical_edge(r, (col + 1) % l),
            ],
        }
    }

    /// The four checks touching an edge, ordered [star, star, plaquette,
    /// plaquette]. The order is fixed so downstream feature layouts are
    /// reproducible.
    pub fn incident_checks(&self, edge: usize) -> [usize; 4] {
        let l = self.l;
        let e = self.edge_coord(edge);
        let (r, c) = (e.row, e.col);
        match e.kind {
            EdgeKind::Horizontal => [
                self.star_check(r, c),
                self.star_check(r, (c + 1) % l),
                self.plaquette_check(r, c),
                self.plaquette_check((r + l - 1) % l, c),
            ],
            EdgeKind::Vertical => [
                self.star_check(r, c),
                self.star_check((r + 1) % l, c),
                self.plaquette_check(r, c),
                self.plaquette_check(r, (c + l - 1) % l),
            ],
        }
    }

    pub fn syndrome_of(&self, err: &PauliError) -> Syndrome {
        assert_eq!(err.n(), self.n, "error on {} qubits given to an n={} code", err.n(), self.n);
        let mut bits = BitVec::zeros(self.m);
        for (j, row) in self.h_swapped.iter().enumerate() {
            if row.dot(err.bits()) {
                bits.set(j, true);
            }
        }
        Syndrome::new(bits)
    }

    /// 2k-bit logical effect: bit i is the symplectic product of logical row i
    /// with the error. Zero for anything in the row span of H.
    pub fn logical_effect(&self, err: &PauliError) -> BitVec {
        assert_eq!(err.n(), self.n, "error on {} qubits given to an n={} code", err.n(), self.n);
        let mut bits = BitVec::zeros(2 * self.k);
        for (i, row) in self.logicals_swapped.iter().enumerate() {
            if row.dot(err.bits()) {
                bits.set(i, true);
            }
        }
        bits
    }

    pub fn h_rank(&self) -> usize {
        gf2::rank(&self.h)
    }

    pub fn dump_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "# toric code L={}: n={} qubits, m={} checks, k={} logical qubits\n",
            self.l, self.n, self.m, self.k
        ));
        out.push_str("# rows are (z|x) bit strings; checks 0..L^2-1 are stars, L^2..2L^2-1 plaquettes\n");
        out.push_str(&format!("H {} {}\n", self.m, 2 * self.n));
        for row in &self.h {
            out.push_str(&row.to_bit_string());
            out.push('\n');
        }
        out.push_str(&format!("LOGICALS {} {}\n", self.logicals.len(), 2 * self.n));
        for row in &self.logicals {
            out.push_str(&row.to_bit_string());
            out.push('\n');
        }
        out
    }
}
