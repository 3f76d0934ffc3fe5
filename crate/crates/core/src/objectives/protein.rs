//! Planar AB off-lattice protein model over bond angles (degrees).

use super::{Landscape, ObjectiveError};
use rand::Rng;
use std::sync::OnceLock;

const OVERLAP_RADIUS: f64 = 1e-12;
const TABLE: &str = include_str!("../../data/proteins.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Species {
    A,
    B,
}

impl Species {
    pub fn zeta(self) -> f64 {
        match self {
            Species::A => 1.0,
            Species::B => -1.0,
        }
    }
}

/// Pair coefficient: 1 for AA, 0.5 for BB, -0.5 for AB.
pub fn pair_coefficient(a: Species, b: Species) -> f64 {
    let (zi, zj) = (a.zeta(), b.zeta());
    (1.0 + zi + zj + 5.0 * zi * zj) / 8.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProteinModel {
    id: String,
    sequence: Vec<Species>,
}

/// Built-in sequences, in file order.
pub fn protein_table() -> &'static [ProteinModel] {
    static CELL: OnceLock<Vec<ProteinModel>> = OnceLock::new();
    CELL.get_or_init(|| parse_table(TABLE).expect("bundled protein table is valid"))
}

/// Parses lines of `<ID> <SEQUENCE>`; blank lines and `#` comments are skipped.
pub fn parse_table(text: &str) -> Result<Vec<ProteinModel>, ObjectiveError> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|line| {
            let mut parts = line.split_whitespace();
            match (parts.next(), parts.next(), parts.next()) {
                (Some(id), Some(seq), None) => ProteinModel::new(id, seq),
                _ => Err(ObjectiveError::BadId(line.to_string())),
            }
        })
        .collect()
}

impl ProteinModel {
    pub fn new(id: &str, sequence: &str) -> Result<Self, ObjectiveError> {
        let sequence = sequence
            .chars()
            .map(|c| match c {
                'A' => Ok(Species::A),
                'B' => Ok(Species::B),
                _ => Err(ObjectiveError::BadId(format!("{id}: bad residue `{c}`"))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        if sequence.len() < 3 {
            return Err(ObjectiveError::Dimension {
                got: sequence.len(),
                reason: "a chain needs at least 3 monomers".into(),
            });
        }
        Ok(ProteinModel {
            id: id.to_string(),
            sequence,
        })
    }

    pub fn by_id(id: &str) -> Result<Self, ObjectiveError> {
        protein_table()
            .iter()
            .find(|m| m.id == id)
            .cloned()
            .ok_or_else(|| ObjectiveError::UnknownProtein(id.to_string()))
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn sequence(&self) -> &[Species] {
        &self.sequence
    }

    pub fn sequence_string(&self) -> String {
        self.sequence
            .iter()
            .map(|s| match s {
                Species::A => 'A',
                Species::B => 'B',
            })
            .collect()
    }

    pub fn num_monomers(&self) -> usize {
        self.sequence.len()
    }

    pub fn num_angles(&self) -> usize {
        self.sequence.len() - 2
    }

    fn check_angles(&self, angles: &[f64]) -> Result<(), ObjectiveError> {
        if angles.len() != self.num_angles() {
            return Err(ObjectiveError::Arity {
                expected: self.num_angles(),
                got: angles.len(),
            });
        }
        // -180 is accepted as the same direction as 180.
        for (index, &value) in angles.iter().enumerate() {
            if !(-180.0..=180.0).contains(&value) {
                return Err(ObjectiveError::Domain { index, value });
            }
        }
        Ok(())
    }

    /// Random self-avoiding conformation: angles drawn uniformly in turn,
    /// redrawing any that place the new monomer closer than `min_dist` to a
    /// nonbonded predecessor.
    pub fn random_conformation<R: Rng>(&self, rng: &mut R, min_dist: f64) -> Vec<f64> {
        const TRIES: usize = 100;
        'restart: loop {
            let mut angles = Vec::with_capacity(self.num_angles());
            let mut pts = vec![[0.0, 0.0], [1.0, 0.0]];
            let mut heading = 0.0f64;
            for _ in 0..self.num_angles() {
                let last = pts[pts.len() - 1];
                let placed = (0..TRIES).find_map(|_| {
                    let a: f64 = rng.random_range(-180.0..180.0);
                    let h = heading + a.to_radians();
                    let p = [last[0] + h.cos(), last[1] + h.sin()];
                    let clear = pts[..pts.len() - 1]
                        .iter()
                        .all(|q| dist(*q, p) >= min_dist);
                    clear.then_some((a, h, p))
                });
                let Some((a, h, p)) = placed else {
                    continue 'restart;
                };
                angles.push(a);
                heading = h;
                pts.push(p);
            }
            return angles;
        }
    }

    /// Monomer coordinates: `p0 = (0, 0)`, `p1 = (1, 0)`, then unit bonds with
    /// the heading turned by each angle in turn.
    pub fn positions(&self, angles: &[f64]) -> Result<Vec<[f64; 2]>, ObjectiveError> {
        self.check_angles(angles)?;
        let mut pts = Vec::with_capacity(self.num_monomers());
        pts.push([0.0, 0.0]);
        pts.push([1.0, 0.0]);
        let mut heading = 0.0f64;
        for &a in angles {
            heading += a.to_radians();
            let [x, y] = pts[pts.len() - 1];
            pts.push([x + heading.cos(), y + heading.sin()]);
        }
        Ok(pts)
    }

    fn bend(angles: &[f64]) -> f64 {
        angles
            .iter()
            .map(|a| (1.0 - a.to_radians().cos()) / 4.0)
            .sum()
    }

    /// Energy and the first overlapping pair, if any. Overlap yields `+inf`.
    pub fn energy_with_flag(
        &self,
        angles: &[f64],
    ) -> Result<(f64, Option<(usize, usize)>), ObjectiveError> {
        let p = self.positions(angles)?;
        let mut e = Self::bend(angles);
        let n = p.len();
        for i in 0..n {
            for j in i + 2..n {
                let r = dist(p[i], p[j]);
                if r < OVERLAP_RADIUS {
                    return Ok((f64::INFINITY, Some((i, j))));
                }
                let c = pair_coefficient(self.sequence[i], self.sequence[j]);
                let r6 = r.powi(-6);
                e += r6 * r6 - c * r6;
            }
        }
        Ok((e, None))
    }

    pub fn energy(&self, angles: &[f64]) -> Result<f64, ObjectiveError> {
        Ok(self.energy_with_flag(angles)?.0)
    }

    /// Energy and its partials with respect to each angle (per degree).
    pub fn energy_and_gradient(&self, angles: &[f64]) -> Result<(f64, Vec<f64>), ObjectiveError> {
        let p = self.positions(angles)?;
        let n = p.len();
        let mut e = Self::bend(angles);
        let mut gp = vec![[0.0f64; 2]; n];
        for i in 0..n {
            for j in i + 2..n {
                let dx = p[j][0] - p[i][0];
                let dy = p[j][1] - p[i][1];
                let r = (dx * dx + dy * dy).sqrt();
                if r < OVERLAP_RADIUS {
                    return Err(ObjectiveError::Overlap { i, j });
                }
                let c = pair_coefficient(self.sequence[i], self.sequence[j]);
                let r6 = r.powi(-6);
                e += r6 * r6 - c * r6;
                let de_dr = -12.0 * r6 * r6 / r + 6.0 * c * r6 / r;
                let (ux, uy) = (de_dr * dx / r, de_dr * dy / r);
                gp[j][0] += ux;
                gp[j][1] += uy;
                gp[i][0] -= ux;
                gp[i][1] -= uy;
            }
        }
        // Angle k turns every monomer from k + 2 on about monomer k + 1:
        // dp_m = J (p_m - p_{k+1}) with J(x, y) = (-y, x).
        let mut grad = vec![0.0; angles.len()];
        let mut torque = 0.0;
        let mut force = [0.0f64; 2];
        for k in (0..angles.len()).rev() {
            let m = k + 2;
            torque += gp[m][0] * -p[m][1] + gp[m][1] * p[m][0];
            force[0] += gp[m][0];
            force[1] += gp[m][1];
            let pivot = p[k + 1];
            let pair = torque - (force[0] * -pivot[1] + force[1] * pivot[0]);
            let bend = angles[k].to_radians().sin() / 4.0;
            grad[k] = (pair + bend).to_radians();
        }
        Ok((e, grad))
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

impl Landscape for ProteinModel {
    fn value(&self, x: &[f64]) -> Result<f64, ObjectiveError> {
        self.energy(x)
    }

    fn value_and_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>), ObjectiveError> {
        self.energy_and_gradient(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coefficients_match_species_table() {
        assert_eq!(pair_coefficient(Species::A, Species::A), 1.0);
        assert_eq!(pair_coefficient(Species::B, Species::B), 0.5);
        assert_eq!(pair_coefficient(Species::A, Species::B), -0.5);
        assert_eq!(pair_coefficient(Species::B, Species::A), -0.5);
    }

    #[test]
    fn table_has_sixteen_sequences() {
        let t = protein_table();
        assert_eq!(t.len(), 16);
        let m = ProteinModel::by_id("1BXP").unwrap();
        assert_eq!(m.sequence_string(), "ABBBBBBABBBAB");
        assert_eq!(m.num_angles(), 11);
        assert!(ProteinModel::by_id("XXXX").is_err());
    }

    #[test]
    fn straight_chain_positions() {
        let m = ProteinModel::new("t", "AABBA").unwrap();
        let p = m.positions(&[0.0; 3]).unwrap();
        for (k, q) in p.iter().enumerate() {
            assert_eq!(*q, [k as f64, 0.0]);
        }
    }

    #[test]
    fn right_angle_turn() {
        let m = ProteinModel::new("t", "AAA").unwrap();
        let p = m.positions(&[90.0]).unwrap();
        assert!((p[2][0] - 1.0).abs() < 1e-15 && (p[2][1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn domain_and_overlap_errors() {
        let m = ProteinModel::new("t", "AAAA").unwrap();
        assert!(matches!(
            m.energy(&[0.0, 180.5]),
            Err(ObjectiveError::Domain { index: 1, .. })
        ));
        assert!(m.energy(&[-180.0, 0.0]).is_ok());
        let m = ProteinModel::new("t", "AAAAA").unwrap();
        // A half-turn folds monomer 2 back onto monomer 0.
        let (e, flag) = m.energy_with_flag(&[180.0, 0.0, 0.0]).unwrap();
        assert_eq!(e, f64::INFINITY);
        assert_eq!(flag, Some((0, 2)));
        assert!(matches!(
            m.energy_and_gradient(&[180.0, 0.0, 0.0]),
            Err(ObjectiveError::Overlap { .. })
        ));
    }

    #[test]
    fn bad_residue_rejected() {
        assert!(ProteinModel::new("t", "ABC").is_err());
        assert!(ProteinModel::new("t", "AB").is_err());
        assert!(parse_table("1ABC AAB extra").is_err());
    }
}
