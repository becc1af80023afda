//! Object-conditioned text adaptor: class prompts are embedded, mixed by a
//! sparse expert layer, and distilled into one anchor vector by prototype
//! cross-attention.

pub mod embedder;
pub mod moe;
pub mod prompts;
pub mod prototype;

pub use embedder::{GaussianEmbedder, HashEmbedder, TextEmbedder};
pub use moe::{moe_forward, MoeParams};
pub use prompts::{build_prompts, PromptCatalog};
pub use prototype::{octa_refine, prototype_attention, Mode, PrototypeParams};

use crate::error::Result;
use crate::numerics::{Bound, Graph, ParameterStore, Scalar, Tensor, Var};

/// The anchor is shared by both visual branches, so the two sides are the
/// same tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct TextAnchors<T> {
    pub to_rgb: Tensor<T>,
    pub to_3d: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OctaParams {
    pub moe: MoeParams,
    pub proto: PrototypeParams,
}

impl OctaParams {
    /// Records the anchor for `class_name` on the bound graph.
    pub fn anchor<T: Scalar>(
        &self,
        p: &Bound<'_, T>,
        class_name: &str,
        catalog: &PromptCatalog,
        embedder: &dyn TextEmbedder<T>,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let sentences = build_prompts(class_name, catalog)?;
        let t = p.graph.leaf(embedder.embed(&sentences)?);
        let t_hat = self.moe.forward(p, t)?;
        self.proto.forward(p, t_hat, mode)
    }
}

pub fn octa_forward<T: Scalar>(
    store: &ParameterStore<T>,
    class_name: &str,
    catalog: &PromptCatalog,
    embedder: &dyn TextEmbedder<T>,
    params: &OctaParams,
    mode: &mut Mode<'_>,
) -> Result<TextAnchors<T>> {
    let g = Graph::new();
    let p = store.bind(&g);
    let v = params.anchor(&p, class_name, catalog, embedder, mode)?;
    let anchor = g.value(v);
    Ok(TextAnchors {
        to_rgb: anchor.clone(),
        to_3d: anchor,
    })
}
