//! Named configurations and recognition of a graph against them.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::graph::{
    ConnectionGraph, GraphError, ModuleGeometry, ModuleId, ModuleKind, ModuleNode, PortKind,
    PortRef,
};
use crate::kinematics::LimbGeometry;

const BUILTIN: &str = include_str!("../data/templates.toml");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateModule {
    pub label: String,
    pub kind: ModuleKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Template {
    pub name: String,
    #[serde(default)]
    pub aliases: Vec<String>,
    #[serde(default)]
    pub description: String,
    pub modules: Vec<TemplateModule>,
    /// Pairs of `label.port`.
    #[serde(default)]
    pub edges: Vec<[String; 2]>,
}

impl Template {
    fn kind_of(&self, label: &str) -> Option<ModuleKind> {
        self.modules.iter().find(|m| m.label == label).map(|m| m.kind)
    }

    fn parsed_edges(&self) -> Result<Vec<(PortRef, PortRef)>, GraphError> {
        self.edges
            .iter()
            .map(|[a, b]| Ok((a.parse()?, b.parse()?)))
            .collect()
    }

    /// Checks labels are unique and every edge names a known label and port.
    pub fn check(&self) -> Result<(), GraphError> {
        let mut labels = BTreeSet::new();
        for m in &self.modules {
            if !labels.insert(&m.label) {
                return Err(GraphError::Template(format!(
                    "{}: duplicate label {}",
                    self.name, m.label
                )));
            }
        }
        self.instantiate("", &LimbGeometry::default(), &ModuleGeometry::default())
            .map(|_| ())
            .map_err(|e| GraphError::Template(format!("{}: {e}", self.name)))
    }

    /// Builds the graph with module ids `{prefix}{label}`.
    pub fn instantiate(
        &self,
        prefix: &str,
        limb: &LimbGeometry,
        geometry: &ModuleGeometry,
    ) -> Result<ConnectionGraph, GraphError> {
        let mut g = ConnectionGraph::new().with_interface_gap(geometry.interface_gap);
        for m in &self.modules {
            g = g.add_module(ModuleNode::new(
                &format!("{prefix}{}", m.label),
                m.kind,
                limb,
                geometry,
            ))?;
        }
        for (a, b) in self.parsed_edges()? {
            let a = PortRef::new(format!("{prefix}{}", a.module), a.port);
            let b = PortRef::new(format!("{prefix}{}", b.module), b.port);
            g = g.attach(&a, &b)?;
        }
        Ok(g)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TemplateFile {
    #[serde(default)]
    template: Vec<Template>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemplateRegistry {
    templates: Vec<Template>,
}

impl TemplateRegistry {
    pub fn builtin() -> Self {
        TemplateRegistry::from_toml_str(BUILTIN).expect("built-in templates are valid")
    }

    pub fn from_toml_str(text: &str) -> Result<Self, GraphError> {
        let file: TemplateFile =
            toml::from_str(text).map_err(|e| GraphError::Template(e.to_string()))?;
        let mut registry = TemplateRegistry {
            templates: Vec::new(),
        };
        for t in file.template {
            registry.insert(t)?;
        }
        Ok(registry)
    }

    /// Adds a template. Names and aliases must stay unique.
    pub fn insert(&mut self, template: Template) -> Result<(), GraphError> {
        template.check()?;
        for key in std::iter::once(&template.name).chain(&template.aliases) {
            if self.get(key).is_ok() {
                return Err(GraphError::Template(format!("name {key} already registered")));
            }
        }
        self.templates.push(template);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Template, GraphError> {
        self.templates
            .iter()
            .find(|t| t.name == name || t.aliases.iter().any(|a| a == name))
            .ok_or_else(|| GraphError::UnknownTemplate(name.to_owned()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.templates.iter().map(|t| t.name.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Template> {
        self.templates.iter()
    }

    /// Every template the graph matches.
    pub fn recognize(&self, graph: &ConnectionGraph) -> Vec<&str> {
        self.templates
            .iter()
            .filter(|t| validate_configuration(graph, t).valid)
            .map(|t| t.name.as_str())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub template: String,
    pub valid: bool,
    /// Template label to module id, when valid.
    pub mapping: BTreeMap<String, ModuleId>,
    pub issues: Vec<String>,
}

/// Port class used for matching: gripper names are significant, fixtures
/// of one module are interchangeable.
fn port_class(kind: PortKind, name: &str) -> String {
    match kind {
        PortKind::Gripper => name.to_owned(),
        PortKind::Fixture => "*".to_owned(),
    }
}

type Signature = (ModuleId, String, ModuleId, String);

fn signature(a: (ModuleId, String), b: (ModuleId, String)) -> Signature {
    let (x, y) = if a <= b { (a, b) } else { (b, a) };
    (x.0, x.1, y.0, y.1)
}

/// Checks whether `graph` is an instance of `template`, up to module ids,
/// which end of each limb is the base, and which fixture of a module is used.
/// Pallets are ground: unless the template lists pallets, they and their
/// edges are left out.
pub fn validate_configuration(graph: &ConnectionGraph, template: &Template) -> ValidationReport {
    let mut report = ValidationReport {
        template: template.name.clone(),
        valid: false,
        mapping: BTreeMap::new(),
        issues: Vec::new(),
    };
    let wants_pallet = template.modules.iter().any(|m| m.kind == ModuleKind::Pallet);
    let considered: Vec<&ModuleNode> = graph
        .modules()
        .filter(|m| wants_pallet || m.kind != ModuleKind::Pallet)
        .collect();
    let ids: BTreeSet<&ModuleId> = considered.iter().map(|m| &m.id).collect();

    let mut want: BTreeMap<ModuleKind, usize> = BTreeMap::new();
    for m in &template.modules {
        *want.entry(m.kind).or_default() += 1;
    }
    let mut have: BTreeMap<ModuleKind, usize> = BTreeMap::new();
    for m in &considered {
        *have.entry(m.kind).or_default() += 1;
    }
    let kinds: BTreeSet<ModuleKind> = want.keys().chain(have.keys()).copied().collect();
    for k in kinds {
        let (w, h) = (want.get(&k).copied().unwrap_or(0), have.get(&k).copied().unwrap_or(0));
        if w != h {
            report
                .issues
                .push(format!("expected {w} {k:?} module(s), found {h}"));
        }
    }
    if !report.issues.is_empty() {
        return report;
    }
    let template_edges = match template.parsed_edges() {
        Ok(e) => e,
        Err(e) => {
            report.issues.push(e.to_string());
            return report;
        }
    };

    let mut graph_sigs: Vec<Signature> = graph
        .edges()
        .filter(|e| ids.contains(&e.a.module) && ids.contains(&e.b.module))
        .map(|e| {
            let class = |p: &PortRef| {
                let kind = graph.port(p).map(|c| c.kind).unwrap_or(PortKind::Fixture);
                (p.module.clone(), port_class(kind, &p.port))
            };
            signature(class(&e.a), class(&e.b))
        })
        .collect();
    graph_sigs.sort();

    let mut search = Search {
        template,
        edges: &template_edges,
        candidates: &considered,
        target: &graph_sigs,
        assigned: Vec::new(),
        used: BTreeSet::new(),
    };
    if search.run(0) {
        report.valid = true;
        report.mapping = search
            .assigned
            .iter()
            .map(|(label, id, _)| (label.clone(), id.clone()))
            .collect();
    } else {
        report
            .issues
            .push("no module assignment reproduces the edge pattern".to_owned());
    }
    report
}

struct Search<'a> {
    template: &'a Template,
    edges: &'a [(PortRef, PortRef)],
    candidates: &'a [&'a ModuleNode],
    target: &'a [Signature],
    /// (label, module, limb mounted reversed)
    assigned: Vec<(String, ModuleId, bool)>,
    used: BTreeSet<ModuleId>,
}

impl Search<'_> {
    fn run(&mut self, index: usize) -> bool {
        if index == self.template.modules.len() {
            return self.edges_match();
        }
        let wanted = &self.template.modules[index];
        for node in self.candidates.iter().filter(|n| n.kind == wanted.kind) {
            if self.used.contains(&node.id) {
                continue;
            }
            let flips: &[bool] = if node.kind == ModuleKind::Limb {
                &[false, true]
            } else {
                &[false]
            };
            for &flip in flips {
                self.used.insert(node.id.clone());
                self.assigned.push((wanted.label.clone(), node.id.clone(), flip));
                if self.run(index + 1) {
                    return true;
                }
                self.assigned.pop();
                self.used.remove(&node.id);
            }
        }
        false
    }

    fn map_port(&self, port: &PortRef) -> (ModuleId, String) {
        let (_, id, flip) = self
            .assigned
            .iter()
            .find(|(label, _, _)| label == port.module.as_str())
            .expect("every label is assigned");
        let kind = self.template.kind_of(port.module.as_str());
        let class = match (kind, port.port.as_str(), flip) {
            (Some(ModuleKind::Limb), "base", true) => "tool".to_owned(),
            (Some(ModuleKind::Limb), "tool", true) => "base".to_owned(),
            (Some(ModuleKind::Limb), name, _) => name.to_owned(),
            _ => "*".to_owned(),
        };
        (id.clone(), class)
    }

    fn edges_match(&self) -> bool {
        let mut sigs: Vec<Signature> = self
            .edges
            .iter()
            .map(|(a, b)| signature(self.map_port(a), self.map_port(b)))
            .collect();
        sigs.sort();
        sigs == self.target
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geo() -> (LimbGeometry, ModuleGeometry) {
        (LimbGeometry::default(), ModuleGeometry::default())
    }

    #[test]
    fn builtin_templates_load() {
        let r = TemplateRegistry::builtin();
        let names: Vec<_> = r.names().collect();
        for n in [
            "limb4", "limb8", "vehicle", "dragon", "minimal", "quadruped", "cargo",
            "cargo_minimal", "bike", "spinbot",
        ] {
            assert!(names.contains(&n), "{n}");
        }
        assert_eq!(r.get("cargo-minimal").unwrap().name, "cargo_minimal");
        assert_eq!(r.get("8dof-limb").unwrap().name, "limb8");
        assert_eq!(r.get("nope").unwrap_err().code(), "UNKNOWN_TARGET");
    }

    #[test]
    fn every_template_validates_against_itself() {
        let r = TemplateRegistry::builtin();
        let (l, m) = geo();
        for t in r.iter() {
            let g = t.instantiate("x_", &l, &m).unwrap();
            g.check_invariants().unwrap();
            let rep = validate_configuration(&g, t);
            assert!(rep.valid, "{}: {:?}", t.name, rep.issues);
            assert_eq!(rep.mapping.len(), t.modules.len());
        }
    }

    #[test]
    fn templates_are_mutually_distinct() {
        let r = TemplateRegistry::builtin();
        let (l, m) = geo();
        for t in r.iter() {
            let g = t.instantiate("", &l, &m).unwrap();
            let hits = r.recognize(&g);
            // Bike and spinbot are the same graph.
            let expected = match t.name.as_str() {
                "bike" | "spinbot" => vec!["bike", "spinbot"],
                n => vec![n],
            };
            assert_eq!(hits, expected, "{}", t.name);
        }
    }

    #[test]
    fn reversed_limb_and_other_fixture_still_match() {
        let (l, m) = geo();
        let g = ConnectionGraph::new()
            .add_module(ModuleNode::new("a", ModuleKind::Limb, &l, &m))
            .unwrap()
            .add_module(ModuleNode::new("w", ModuleKind::DualWheel, &l, &m))
            .unwrap()
            .attach(&"a.base".parse().unwrap(), &"w.f0".parse().unwrap())
            .unwrap();
        let r = TemplateRegistry::builtin();
        let rep = validate_configuration(&g, r.get("minimal").unwrap());
        assert!(rep.valid, "{:?}", rep.issues);
    }

    #[test]
    fn missing_module_is_reported() {
        let (l, m) = geo();
        let r = TemplateRegistry::builtin();
        let g = r.get("limb4").unwrap().instantiate("", &l, &m).unwrap();
        let rep = validate_configuration(&g, r.get("vehicle").unwrap());
        assert!(!rep.valid);
        assert!(rep.issues.iter().any(|i| i.contains("DualWheel")));
    }

    #[test]
    fn pallets_are_ground() {
        let (l, m) = geo();
        let r = TemplateRegistry::builtin();
        let g = r
            .get("limb8")
            .unwrap()
            .instantiate("", &l, &m)
            .unwrap()
            .add_module(ModuleNode::new("ground", ModuleKind::Pallet, &l, &m))
            .unwrap();
        assert!(validate_configuration(&g, r.get("limb8").unwrap()).valid);
        let held = g
            .attach(&"upper.base".parse().unwrap(), &"ground.p0".parse().unwrap())
            .unwrap();
        assert!(validate_configuration(&held, r.get("limb8").unwrap()).valid);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut r = TemplateRegistry::builtin();
        let mut t = r.get("limb4").unwrap().clone();
        t.aliases.clear();
        assert!(r.insert(t.clone()).is_err());
        t.name = "solo".into();
        r.insert(t).unwrap();
        assert!(r.get("solo").is_ok());
    }

    #[test]
    fn bad_template_rejected() {
        let text = r#"
            [[template]]
            name = "broken"
            modules = [{ label = "a", kind = "limb" }]
            edges = [["a.tool", "b.f0"]]
        "#;
        assert!(TemplateRegistry::from_toml_str(text).is_err());
    }
}
