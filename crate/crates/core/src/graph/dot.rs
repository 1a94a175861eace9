use std::fmt::Write;

use super::ModelGraph;
use crate::error::Result;
use crate::real::Real;
use crate::tensor::Shape;

/// Graphviz rendering; labels carry node name, op kind, level and the output
/// shape for `input`.
pub fn export_dot<T: Real>(graph: &ModelGraph<T>, input: Shape) -> Result<String> {
    let shapes = graph.shape_infer(input)?;
    let mut s = String::new();
    let _ = writeln!(s, "digraph \"{}\" {{", graph.config().variant_name());
    let _ = writeln!(s, "  rankdir=TB;");
    let _ = writeln!(s, "  node [shape=box, fontname=\"monospace\"];");
    for (node, shape) in graph.nodes().iter().zip(&shapes) {
        let _ = writeln!(
            s,
            "  n{} [label=\"{}\\n{}\\n{}\\n{}\"];",
            node.id,
            node.name,
            node.op.label(),
            node.level,
            shape
        );
    }
    for node in graph.nodes() {
        for &p in &node.parents {
            let _ = writeln!(s, "  n{p} -> n{};", node.id);
        }
    }
    s.push_str("}\n");
    Ok(s)
}
