//! Parameter trees, generic over the leaf type so the same layout serves for
//! weights (`Tensor`), bound tape handles (`Var`) and gradients.

#[derive(Clone, Debug, PartialEq)]
pub struct LinearP<T> {
    /// `in × out`
    pub w: T,
    pub b: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormP<T> {
    pub gamma: T,
    pub beta: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockP<T> {
    pub ln1: NormP<T>,
    pub qkv: LinearP<T>,
    pub proj: LinearP<T>,
    pub ln2: NormP<T>,
    pub fc1: LinearP<T>,
    pub fc2: LinearP<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VitParams<T> {
    pub patch: LinearP<T>,
    /// `1 × d`
    pub cls: T,
    /// `(N + 1) × d`, row 0 belongs to the class token
    pub pos: T,
    pub blocks: Vec<BlockP<T>>,
    pub norm: NormP<T>,
    pub head: LinearP<T>,
}

impl<T> LinearP<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> LinearP<U> {
        LinearP { w: f(&self.w), b: f(&self.b) }
    }

    fn leaves<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((format!("{prefix}.w"), &self.w));
        out.push((format!("{prefix}.b"), &self.b));
    }

    fn leaves_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        out.push((format!("{prefix}.w"), &mut self.w));
        out.push((format!("{prefix}.b"), &mut self.b));
    }
}

impl<T> NormP<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> NormP<U> {
        NormP {
            gamma: f(&self.gamma),
            beta: f(&self.beta),
        }
    }

    fn leaves<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((format!("{prefix}.gamma"), &self.gamma));
        out.push((format!("{prefix}.beta"), &self.beta));
    }

    fn leaves_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        out.push((format!("{prefix}.gamma"), &mut self.gamma));
        out.push((format!("{prefix}.beta"), &mut self.beta));
    }
}

impl<T> BlockP<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> BlockP<U> {
        BlockP {
            ln1: self.ln1.map(f),
            qkv: self.qkv.map(f),
            proj: self.proj.map(f),
            ln2: self.ln2.map(f),
            fc1: self.fc1.map(f),
            fc2: self.fc2.map(f),
        }
    }
}

impl<T> VitParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> VitParams<U> {
        let f = &mut f;
        VitParams {
            patch: self.patch.map(f),
            cls: f(&self.cls),
            pos: f(&self.pos),
            blocks: self.blocks.iter().map(|b| b.map(f)).collect(),
            norm: self.norm.map(f),
            head: self.head.map(f),
        }
    }

    /// Leaves in a fixed canonical order with their checkpoint names.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.patch.leaves("vit.patch", &mut out);
        out.push(("vit.cls".into(), &self.cls));
        out.push(("vit.pos".into(), &self.pos));
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("vit.block{i}");
            b.ln1.leaves(&format!("{p}.ln1"), &mut out);
            b.qkv.leaves(&format!("{p}.qkv"), &mut out);
            b.proj.leaves(&format!("{p}.proj"), &mut out);
            b.ln2.leaves(&format!("{p}.ln2"), &mut out);
            b.fc1.leaves(&format!("{p}.fc1"), &mut out);
            b.fc2.leaves(&format!("{p}.fc2"), &mut out);
        }
        self.norm.leaves("vit.norm", &mut out);
        self.head.leaves("vit.head", &mut out);
        out
    }

    /// Same order as [`VitParams::named`].
    pub fn named_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out = Vec::new();
        self.patch.leaves_mut("vit.patch", &mut out);
        out.push(("vit.cls".into(), &mut self.cls));
        out.push(("vit.pos".into(), &mut self.pos));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("vit.block{i}");
            b.ln1.leaves_mut(&format!("{p}.ln1"), &mut out);
            b.qkv.leaves_mut(&format!("{p}.qkv"), &mut out);
            b.proj.leaves_mut(&format!("{p}.proj"), &mut out);
            b.ln2.leaves_mut(&format!("{p}.ln2"), &mut out);
            b.fc1.leaves_mut(&format!("{p}.fc1"), &mut out);
            b.fc2.leaves_mut(&format!("{p}.fc2"), &mut out);
        }
        self.norm.leaves_mut("vit.norm", &mut out);
        self.head.leaves_mut("vit.head", &mut out);
        out
    }

    pub fn leaves(&self) -> Vec<&T> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    pub fn leaves_mut(&mut self) -> Vec<&mut T> {
        self.named_mut().into_iter().map(|(_, t)| t).collect()
    }
}

/// The three-layer token filter MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams<T> {
    pub l1: LinearP<T>,
    pub l2: LinearP<T>,
    pub l3: LinearP<T>,
}

impl<T> MlpParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> MlpParams<U> {
        let f = &mut f;
        MlpParams {
            l1: self.l1.map(f),
            l2: self.l2.map(f),
            l3: self.l3.map(f),
        }
    }

    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.l1.leaves("filter.l1", &mut out);
        self.l2.leaves("filter.l2", &mut out);
        self.l3.leaves("filter.l3", &mut out);
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out = Vec::new();
        self.l1.leaves_mut("filter.l1", &mut out);
        self.l2.leaves_mut("filter.l2", &mut out);
        self.l3.leaves_mut("filter.l3", &mut out);
        out
    }

    pub fn leaves(&self) -> Vec<&T> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    pub fn leaves_mut(&mut self) -> Vec<&mut T> {
        self.named_mut().into_iter().map(|(_, t)| t).collect()
    }
}
