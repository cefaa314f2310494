//! Static grid description and its JSON file format.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type BusId = u32;

/// Serializes complex per-unit quantities as `{ "re": .., "im": .. }`.
pub(crate) mod complex_pu {
    use num_complex::Complex64;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Pair {
        re: f64,
        im: f64,
    }

    pub fn serialize<S: Serializer>(z: &Complex64, s: S) -> Result<S::Ok, S::Error> {
        Pair { re: z.re, im: z.im }.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Complex64, D::Error> {
        let p = Pair::deserialize(d)?;
        Ok(Complex64::new(p.re, p.im))
    }
}

fn zero() -> Complex64 {
    Complex64::new(0.0, 0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    /// Terminal bus of a machine.
    Machine,
    Load,
    /// Internal endpoint of a tie-line.
    Boundary,
    Network,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Bus {
    pub id: BusId,
    pub kind: BusKind,
    /// Static shunt admittance (p.u.).
    #[serde(with = "complex_pu", default = "zero")]
    pub shunt: Complex64,
    /// Constant-impedance load admittance at nominal voltage (p.u.); a load
    /// drawing `P + jQ` at 1 p.u. is `P - jQ`.
    #[serde(with = "complex_pu", default = "zero")]
    pub load: Complex64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Branch {
    pub from: BusId,
    pub to: BusId,
    /// Series admittance (p.u.).
    #[serde(with = "complex_pu")]
    pub y: Complex64,
    /// Total line-charging susceptance, split equally between the two ends.
    #[serde(default)]
    pub charging: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MachineParams {
    pub bus: BusId,
    /// Inertia constant H (s).
    pub h: f64,
    /// Damping D (p.u. torque per p.u. speed deviation).
    pub d: f64,
    /// Transient reactance x'd (p.u.).
    pub xd_prime: f64,
    /// Scheduled active power for the power flow (ignored on the slack machine).
    pub p_set: f64,
    /// Terminal voltage setpoint (p.u.).
    pub v_set: f64,
    #[serde(default)]
    pub slack: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub internal: Vec<BusId>,
    pub external: Vec<BusId>,
    /// Tie-lines as `[internal_bus, external_bus]` pairs. Pairs given in the
    /// other order are accepted and normalized by [`NetworkModel::validate`].
    pub tie_lines: Vec<[BusId; 2]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkModel {
    #[serde(default)]
    pub name: String,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub machines: Vec<MachineParams>,
    pub partition: Partition,
    pub base_frequency_hz: f64,
}

/// A tie-line resolved against the branch list. Its current is the series
/// current flowing from the internal endpoint towards the external one.
#[derive(Debug, Clone, Copy)]
pub struct TieLine {
    pub branch: usize,
    pub internal_bus: usize,
    pub external_bus: usize,
    pub y: Complex64,
}

impl NetworkModel {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let mut net: NetworkModel = serde_json::from_str(s)?;
        net.validate()?;
        Ok(net)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        Self::from_json_str(&s)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Built-in test grids: `wscc9`, `two_machine`, `two_area`.
    pub fn builtin(name: &str) -> Result<Self> {
        let src = match name {
            "wscc9" => include_str!("../../data/wscc9.json"),
            "two_machine" => include_str!("../../data/two_machine.json"),
            "two_area" => include_str!("../../data/two_area.json"),
            other => return Err(Error::Config(format!("unknown builtin network `{other}`"))),
        };
        Self::from_json_str(src)
    }

    pub fn omega_base(&self) -> f64 {
        2.0 * std::f64::consts::PI * self.base_frequency_hz
    }

    pub fn bus_index(&self, id: BusId) -> Result<usize> {
        self.buses
            .iter()
            .position(|b| b.id == id)
            .ok_or_else(|| Error::Structural(format!("unknown bus id {id}")))
    }

    pub fn is_internal(&self, id: BusId) -> bool {
        self.partition.internal.contains(&id)
    }

    /// Indices of machines whose terminal bus is internal, in machine order.
    pub fn internal_machines(&self) -> Vec<usize> {
        (0..self.machines.len())
            .filter(|&k| self.is_internal(self.machines[k].bus))
            .collect()
    }

    pub fn external_machines(&self) -> Vec<usize> {
        (0..self.machines.len())
            .filter(|&k| !self.is_internal(self.machines[k].bus))
            .collect()
    }

    /// Resolves the partition's tie-lines against the branch list.
    pub fn tie_lines(&self) -> Result<Vec<TieLine>> {
        self.partition
            .tie_lines
            .iter()
            .map(|&[a, b]| {
                let branch = self
                    .branches
                    .iter()
                    .position(|br| (br.from == a && br.to == b) || (br.from == b && br.to == a))
                    .ok_or_else(|| Error::Structural(format!("tie-line {a}-{b} is not a branch")))?;
                let (int_id, ext_id) = if self.is_internal(a) { (a, b) } else { (b, a) };
                Ok(TieLine {
                    branch,
                    internal_bus: self.bus_index(int_id)?,
                    external_bus: self.bus_index(ext_id)?,
                    y: self.branches[branch].y,
                })
            })
            .collect()
    }

    /// Distinct internal endpoints of the tie-lines, in first-appearance order.
    pub fn boundary_buses(&self) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for t in self.tie_lines()? {
            if !out.contains(&t.internal_bus) {
                out.push(t.internal_bus);
            }
        }
        Ok(out)
    }

    /// Checks the structural invariants and normalizes tie-line orientation.
    pub fn validate(&mut self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for b in &self.buses {
            if !ids.insert(b.id) {
                return Err(Error::Structural(format!("duplicate bus id {}", b.id)));
            }
        }
        for br in &self.branches {
            self.bus_index(br.from)?;
            self.bus_index(br.to)?;
            if br.from == br.to {
                return Err(Error::Structural(format!("self-loop branch at bus {}", br.from)));
            }
        }
        if self.base_frequency_hz <= 0.0 {
            return Err(Error::Structural("base frequency must be positive".into()));
        }

        let mut slack = 0;
        let mut machine_buses = BTreeSet::new();
        for m in &self.machines {
            self.bus_index(m.bus)?;
            if !(m.h > 0.0 && m.xd_prime > 0.0) {
                return Err(Error::Structural(format!(
                    "machine at bus {} needs H > 0 and x'd > 0",
                    m.bus
                )));
            }
            if !machine_buses.insert(m.bus) {
                return Err(Error::Structural(format!("two machines at bus {}", m.bus)));
            }
            slack += m.slack as usize;
        }
        if self.machines.is_empty() || slack != 1 {
            return Err(Error::Structural("exactly one slack machine is required".into()));
        }

        let internal: BTreeSet<_> = self.partition.internal.iter().copied().collect();
        let external: BTreeSet<_> = self.partition.external.iter().copied().collect();
        if internal.len() != self.partition.internal.len()
            || external.len() != self.partition.external.len()
            || !internal.is_disjoint(&external)
            || internal.len() + external.len() != self.buses.len()
            || internal.iter().chain(external.iter()).any(|id| !ids.contains(id))
        {
            return Err(Error::Structural(
                "partition must split the bus set into disjoint internal and external parts".into(),
            ));
        }
        for pair in self.partition.tie_lines.iter_mut() {
            let [a, b] = *pair;
            match (internal.contains(&a), internal.contains(&b)) {
                (true, false) => {}
                (false, true) => *pair = [b, a],
                _ => {
                    return Err(Error::Structural(format!(
                        "tie-line {a}-{b} must have exactly one internal endpoint"
                    )))
                }
            }
        }
        // every crossing branch must be declared as a tie-line
        for br in &self.branches {
            if internal.contains(&br.from) != internal.contains(&br.to)
                && !self
                    .partition
                    .tie_lines
                    .iter()
                    .any(|&[a, b]| (a == br.from && b == br.to) || (a == br.to && b == br.from))
            {
                return Err(Error::Structural(format!(
                    "branch {}-{} crosses the partition but is not a tie-line",
                    br.from, br.to
                )));
            }
        }
        self.tie_lines()?;

        if !self.is_connected() {
            return Err(Error::Structural("branch graph is not connected".into()));
        }
        Ok(())
    }

    fn is_connected(&self) -> bool {
        if self.buses.is_empty() {
            return true;
        }
        let index: HashMap<BusId, usize> =
            self.buses.iter().enumerate().map(|(i, b)| (b.id, i)).collect();
        let mut adj = vec![Vec::new(); self.buses.len()];
        for br in &self.branches {
            let (f, t) = (index[&br.from], index[&br.to]);
            adj[f].push(t);
            adj[t].push(f);
        }
        let mut seen = vec![false; self.buses.len()];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(i) = queue.pop_front() {
            for &j in &adj[i] {
                if !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}
