//! Writes the reference encoder as ONNX graphs following the backend contract.
//!
//! The graphs use only standard opset-13 operators, so any ONNX runtime can
//! execute them. They exist to exercise the ONNX adapter end to end and to
//! give `selftest --backend` a small directory to run against.

use std::fs;
use std::path::Path;

use abs_core::backend::{io_names, ModelSpecFile, ReferenceEncoder, SplitEncoder, MODEL_SPEC_FILE};
use abs_core::tensor::Tensor;
use abs_core::{Error, Result};
use prost::Message;
use tract_onnx::pb;
use tract_onnx::pb::attribute_proto::AttributeType;
use tract_onnx::pb::tensor_proto::DataType;

use crate::{ATTENTION_FILE, FULL_FILE, PREFIX_FILE, SUFFIX_FILE};

const OPSET: i64 = 13;
const LN_EPS: f32 = 1e-5;
const GELU_C: f32 = 0.797_884_6;

fn attr_int(name: &str, i: i64) -> pb::AttributeProto {
    pb::AttributeProto {
        name: name.into(),
        r#type: AttributeType::Int as i32,
        i,
        ..Default::default()
    }
}

fn attr_ints(name: &str, ints: &[i64]) -> pb::AttributeProto {
    pb::AttributeProto {
        name: name.into(),
        r#type: AttributeType::Ints as i32,
        ints: ints.to_vec(),
        ..Default::default()
    }
}

fn value_info(name: &str, shape: &[usize]) -> pb::ValueInfoProto {
    use pb::tensor_shape_proto::{dimension::Value, Dimension};
    let dim = shape
        .iter()
        .map(|&n| Dimension {
            value: Some(Value::DimValue(n as i64)),
            ..Default::default()
        })
        .collect();
    pb::ValueInfoProto {
        name: name.into(),
        r#type: Some(pb::TypeProto {
            value: Some(pb::type_proto::Value::TensorType(pb::type_proto::Tensor {
                elem_type: DataType::Float as i32,
                shape: Some(pb::TensorShapeProto { dim }),
            })),
            ..Default::default()
        }),
        ..Default::default()
    }
}

/// Accumulates nodes and initializers with generated value names.
#[derive(Default)]
struct GraphBuilder {
    nodes: Vec<pb::NodeProto>,
    initializers: Vec<pb::TensorProto>,
    next: usize,
}

impl GraphBuilder {
    fn fresh(&mut self, hint: &str) -> String {
        self.next += 1;
        format!("{hint}_{}", self.next)
    }

    fn constant(&mut self, name: &str, shape: &[usize], data: &[f32]) -> String {
        self.initializers.push(pb::TensorProto {
            name: name.into(),
            dims: shape.iter().map(|&n| n as i64).collect(),
            data_type: DataType::Float as i32,
            float_data: data.to_vec(),
            ..Default::default()
        });
        name.to_string()
    }

    fn scalar(&mut self, value: f32) -> String {
        let name = self.fresh("scalar");
        self.constant(&name, &[], &[value])
    }

    fn ints(&mut self, values: &[i64]) -> String {
        let name = self.fresh("ints");
        self.initializers.push(pb::TensorProto {
            name: name.clone(),
            dims: vec![values.len() as i64],
            data_type: DataType::Int64 as i32,
            int64_data: values.to_vec(),
            ..Default::default()
        });
        name
    }

    fn index(&mut self, value: i64) -> String {
        let name = self.fresh("index");
        self.initializers.push(pb::TensorProto {
            name: name.clone(),
            dims: vec![],
            data_type: DataType::Int64 as i32,
            int64_data: vec![value],
            ..Default::default()
        });
        name
    }

    fn node_named(&mut self, op: &str, inputs: &[&str], output: &str, attrs: Vec<pb::AttributeProto>) -> String {
        self.nodes.push(pb::NodeProto {
            op_type: op.into(),
            name: format!("{op}_{}", self.nodes.len()),
            input: inputs.iter().map(|s| s.to_string()).collect(),
            output: vec![output.to_string()],
            attribute: attrs,
            ..Default::default()
        });
        output.to_string()
    }

    fn node(&mut self, op: &str, inputs: &[&str], attrs: Vec<pb::AttributeProto>) -> String {
        let out = self.fresh(&op.to_ascii_lowercase());
        self.node_named(op, inputs, &out, attrs)
    }

    fn reshape(&mut self, x: &str, shape: &[i64]) -> String {
        let s = self.ints(shape);
        self.node("Reshape", &[x, &s], vec![])
    }

    fn transpose(&mut self, x: &str, perm: &[i64]) -> String {
        self.node("Transpose", &[x], vec![attr_ints("perm", perm)])
    }

    fn slice(&mut self, x: &str, axis: i64, start: i64, end: i64) -> String {
        let (s, e, a) = (self.ints(&[start]), self.ints(&[end]), self.ints(&[axis]));
        self.node("Slice", &[x, &s, &e, &a], vec![])
    }

    fn binary(&mut self, op: &str, a: &str, b: &str) -> String {
        self.node(op, &[a, b], vec![])
    }

    /// `x @ W^T + b` for a `[outputs, inputs]` weight.
    fn linear(&mut self, x: &str, params: &Params, name: &str) -> String {
        let w = params.get(&format!("{name}.weight"));
        let (outputs, inputs) = (w.shape()[0], w.shape()[1]);
        let data = w.as_f32().expect("weights are f32");
        let mut transposed = vec![0f32; data.len()];
        for o in 0..outputs {
            for i in 0..inputs {
                transposed[i * outputs + o] = data[o * inputs + i];
            }
        }
        let wt = self.constant(&format!("{name}.weight_t"), &[inputs, outputs], &transposed);
        let b = params.get(&format!("{name}.bias"));
        let b = self.constant(&format!("{name}.bias"), &[outputs], b.as_f32().expect("f32"));
        let y = self.binary("MatMul", x, &wt);
        self.binary("Add", &y, &b)
    }

    fn layer_norm(&mut self, x: &str, params: &Params, name: &str) -> String {
        let axes = vec![attr_ints("axes", &[-1]), attr_int("keepdims", 1)];
        let mean = self.node("ReduceMean", &[x], axes.clone());
        let centered = self.binary("Sub", x, &mean);
        let sq = self.binary("Mul", &centered, &centered);
        let var = self.node("ReduceMean", &[&sq], axes);
        let eps = self.scalar(LN_EPS);
        let var = self.binary("Add", &var, &eps);
        let std = self.node("Sqrt", &[&var], vec![]);
        let normed = self.binary("Div", &centered, &std);
        let g = params.get(&format!("{name}.weight"));
        let g = self.constant(&format!("{name}.weight"), g.shape(), g.as_f32().expect("f32"));
        let b = params.get(&format!("{name}.bias"));
        let b = self.constant(&format!("{name}.bias"), b.shape(), b.as_f32().expect("f32"));
        let scaled = self.binary("Mul", &normed, &g);
        self.binary("Add", &scaled, &b)
    }

    fn gelu(&mut self, x: &str) -> String {
        let x2 = self.binary("Mul", x, x);
        let x3 = self.binary("Mul", &x2, x);
        let k = self.scalar(0.044_715);
        let cubic = self.binary("Mul", &x3, &k);
        let inner = self.binary("Add", x, &cubic);
        let c = self.scalar(GELU_C);
        let inner = self.binary("Mul", &inner, &c);
        let t = self.node("Tanh", &[&inner], vec![]);
        let one = self.scalar(1.0);
        let t = self.binary("Add", &t, &one);
        let half = self.scalar(0.5);
        let hx = self.binary("Mul", x, &half);
        self.binary("Mul", &hx, &t)
    }

    /// One pre-norm block on a `[1, n, d]` sequence; returns the new sequence
    /// and the `[1, heads, n, n]` attention probabilities.
    fn block(&mut self, x: &str, params: &Params, i: usize, shape: &Shape) -> (String, String) {
        let (n, d, h) = (shape.tokens as i64, shape.d_model as i64, shape.heads as i64);
        let hd = d / h;
        let name = format!("blocks.{i}");
        let normed = self.layer_norm(x, params, &format!("{name}.norm1"));
        let qkv = self.linear(&normed, params, &format!("{name}.qkv"));
        let qkv = self.reshape(&qkv, &[1, n, 3, h, hd]);
        let qkv = self.transpose(&qkv, &[2, 0, 3, 1, 4]);
        let mut parts = Vec::new();
        for j in 0..3 {
            let idx = self.index(j);
            parts.push(self.node("Gather", &[&qkv, &idx], vec![attr_int("axis", 0)]));
        }
        let kt = self.transpose(&parts[1], &[0, 1, 3, 2]);
        let scores = self.binary("MatMul", &parts[0], &kt);
        let scale = self.scalar(1.0 / (hd as f32).sqrt());
        let scores = self.binary("Mul", &scores, &scale);
        let attn = self.node("Softmax", &[&scores], vec![attr_int("axis", -1)]);
        let mixed = self.binary("MatMul", &attn, &parts[2]);
        let mixed = self.transpose(&mixed, &[0, 2, 1, 3]);
        let mixed = self.reshape(&mixed, &[1, n, d]);
        let projected = self.linear(&mixed, params, &format!("{name}.proj"));
        let y = self.binary("Add", x, &projected);
        let normed = self.layer_norm(&y, params, &format!("{name}.norm2"));
        let hidden = self.linear(&normed, params, &format!("{name}.fc1"));
        let hidden = self.gelu(&hidden);
        let out = self.linear(&hidden, params, &format!("{name}.fc2"));
        (self.binary("Add", &y, &out), attn)
    }

    /// Patchify, embed, prepend the class token and add positions.
    fn embed(&mut self, image: &str, params: &Params, shape: &Shape) -> String {
        let (g, p) = (shape.grid as i64, shape.patch as i64);
        let x = self.reshape(image, &[1, 3, g, p, g, p]);
        let x = self.transpose(&x, &[0, 2, 4, 1, 3, 5]);
        let x = self.reshape(&x, &[1, g * g, 3 * p * p]);
        let tokens = self.linear(&x, params, "patch_embed");
        let cls = params.get("cls_token");
        let cls = self.constant("cls_token", &[1, 1, shape.d_model], cls.as_f32().expect("f32"));
        let seq = self.node("Concat", &[&cls, &tokens], vec![attr_int("axis", 1)]);
        let pos = params.get("positions");
        let pos = self.constant("positions", &[1, shape.tokens, shape.d_model], pos.as_f32().expect("f32"));
        self.binary("Add", &seq, &pos)
    }

    /// Final norm of the class token and projection to `embedding`.
    fn head(&mut self, seq: &str, params: &Params) -> String {
        let idx = self.index(0);
        let cls = self.node("Gather", &[seq, &idx], vec![attr_int("axis", 1)]);
        let normed = self.layer_norm(&cls, params, "final_norm");
        let projected = self.linear(&normed, params, "projection");
        self.node_named("Identity", &[&projected], io_names::EMBEDDING, vec![])
    }

    fn finish(self, name: &str, inputs: Vec<pb::ValueInfoProto>, outputs: Vec<pb::ValueInfoProto>) -> pb::ModelProto {
        pb::ModelProto {
            ir_version: 8,
            opset_import: vec![pb::OperatorSetIdProto {
                domain: String::new(),
                version: OPSET,
            }],
            producer_name: "abs-onnx".into(),
            graph: Some(pb::GraphProto {
                name: name.into(),
                node: self.nodes,
                initializer: self.initializers,
                input: inputs,
                output: outputs,
                ..Default::default()
            }),
            ..Default::default()
        }
    }
}

struct Params(Vec<(String, Tensor)>);

impl Params {
    fn get(&self, name: &str) -> &Tensor {
        &self
            .0
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("reference encoder has no parameter `{name}`"))
            .1
    }
}

struct Shape {
    size: usize,
    patch: usize,
    grid: usize,
    tokens: usize,
    d_model: usize,
    embed: usize,
    heads: usize,
    layers: usize,
    split: usize,
}

fn shape_of(encoder: &ReferenceEncoder) -> Result<Shape> {
    let spec = encoder.spec();
    if spec.input.grid.rows != spec.input.grid.cols {
        return Err(Error::Argument("graph export supports square patch grids only".into()));
    }
    Ok(Shape {
        size: spec.input.input_size,
        patch: spec.input.patch_size,
        grid: spec.input.grid.rows,
        tokens: 1 + spec.patches(),
        d_model: spec.d_model,
        embed: spec.embed_dim,
        heads: encoder.heads(),
        layers: spec.layers,
        split: spec.split_layer,
    })
}

/// The four graphs of a reference encoder: prefix, suffix, unsplit and attention.
pub struct ReferenceGraphs {
    pub prefix: pb::ModelProto,
    pub suffix: pb::ModelProto,
    pub full: pb::ModelProto,
    pub attention: pb::ModelProto,
}

pub fn reference_graphs(encoder: &ReferenceEncoder) -> Result<ReferenceGraphs> {
    let s = shape_of(encoder)?;
    let params = Params(encoder.parameters());
    let image_info = value_info(io_names::IMAGE, &[1, 3, s.size, s.size]);
    let seq_info = value_info(io_names::SEQUENCE, &[1, s.tokens, s.d_model]);
    let embedding_info = value_info(io_names::EMBEDDING, &[1, s.embed]);

    let prefix = {
        let mut b = GraphBuilder::default();
        let mut x = b.embed(io_names::IMAGE, &params, &s);
        for i in 0..s.split {
            x = b.block(&x, &params, i, &s).0;
        }
        let cls = b.slice(&x, 1, 0, 1);
        b.node_named("Identity", &[&cls], io_names::CLS, vec![]);
        let tokens = b.slice(&x, 1, 1, s.tokens as i64);
        b.node_named("Identity", &[&tokens], io_names::TOKENS, vec![]);
        b.finish(
            "prefix",
            vec![image_info.clone()],
            vec![
                value_info(io_names::CLS, &[1, 1, s.d_model]),
                value_info(io_names::TOKENS, &[1, s.tokens - 1, s.d_model]),
            ],
        )
    };
    let suffix = {
        let mut b = GraphBuilder::default();
        let mut x = io_names::SEQUENCE.to_string();
        for i in s.split..s.layers {
            x = b.block(&x, &params, i, &s).0;
        }
        b.head(&x, &params);
        b.finish("suffix", vec![seq_info], vec![embedding_info.clone()])
    };
    let full = {
        let mut b = GraphBuilder::default();
        let mut x = b.embed(io_names::IMAGE, &params, &s);
        for i in 0..s.layers {
            x = b.block(&x, &params, i, &s).0;
        }
        b.head(&x, &params);
        b.finish("full", vec![image_info.clone()], vec![embedding_info])
    };
    let attention = {
        let mut b = GraphBuilder::default();
        let mut x = b.embed(io_names::IMAGE, &params, &s);
        let mut attn = String::new();
        for i in 0..s.layers {
            (x, attn) = b.block(&x, &params, i, &s);
        }
        // class-token query row, patch key columns
        let row = b.slice(&attn, 2, 0, 1);
        let row = b.slice(&row, 3, 1, s.tokens as i64);
        let row = b.reshape(&row, &[1, s.heads as i64, (s.tokens - 1) as i64]);
        b.node_named("Identity", &[&row], io_names::CLS_ATTN, vec![]);
        b.finish(
            "attention",
            vec![image_info],
            vec![value_info(io_names::CLS_ATTN, &[1, s.heads, s.tokens - 1])],
        )
    };
    Ok(ReferenceGraphs {
        prefix,
        suffix,
        full,
        attention,
    })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Writes `prefix.onnx`, `suffix.onnx`, `full.onnx`, `attention.onnx` and
/// `model_spec.json` for `encoder` into `dir`.
pub fn export_reference(encoder: &ReferenceEncoder, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let graphs = reference_graphs(encoder)?;
    for (file, model) in [
        (PREFIX_FILE, &graphs.prefix),
        (SUFFIX_FILE, &graphs.suffix),
        (FULL_FILE, &graphs.full),
        (ATTENTION_FILE, &graphs.attention),
    ] {
        write_bytes(&dir.join(file), &model.encode_to_vec())?;
    }
    let mut spec = ModelSpecFile::from_split_spec(encoder.spec());
    spec.heads = Some(encoder.heads());
    spec.model_id = Some(format!("{}-onnx", encoder.model_id()));
    let json = serde_json::to_string_pretty(&spec)?;
    write_bytes(&dir.join(MODEL_SPEC_FILE), (json + "\n").as_bytes())
}
