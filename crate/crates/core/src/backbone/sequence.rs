//! Interleaved text/image sequences.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const MASK: u32 = 1;
pub const EOS: u32 = 2;
/// Ids below this value are reserved for special tokens.
pub const NUM_SPECIAL: u32 = 3;

pub fn is_special(id: u32) -> bool {
    id < NUM_SPECIAL
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Text,
    Image,
}

/// One position of an interleaved sequence.
#[derive(Clone, Debug, PartialEq)]
pub enum Element {
    Text(u32),
    /// A patch of image number `image` (index of the image within the
    /// sequence, in order of appearance).
    Patch { image: u32, values: Vec<f32> },
}

impl Element {
    pub fn modality(&self) -> Modality {
        match self {
            Element::Text(_) => Modality::Text,
            Element::Patch { .. } => Modality::Image,
        }
    }

    pub fn token(&self) -> Option<u32> {
        match self {
            Element::Text(id) => Some(*id),
            Element::Patch { .. } => None,
        }
    }

    pub fn patch(&self) -> Option<&[f32]> {
        match self {
            Element::Patch { values, .. } => Some(values),
            Element::Text(_) => None,
        }
    }
}

/// An ordered mix of text tokens and image patches.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct InterleavedSequence {
    elements: Vec<Element>,
}

impl InterleavedSequence {
    pub fn new(elements: Vec<Element>) -> Self {
        Self { elements }
    }

    pub fn from_tokens(ids: &[u32]) -> Self {
        Self::new(ids.iter().map(|&id| Element::Text(id)).collect())
    }

    pub fn from_image(patches: Vec<Vec<f32>>) -> Self {
        let mut s = Self::default();
        s.push_image(patches);
        s
    }

    pub fn elements(&self) -> &[Element] {
        &self.elements
    }

    pub fn elements_mut(&mut self) -> &mut [Element] {
        &mut self.elements
    }

    pub fn push(&mut self, el: Element) {
        self.elements.push(el);
    }

    /// Appends an image given as a list of patches, numbering it after any
    /// image already present.
    pub fn push_image(&mut self, patches: Vec<Vec<f32>>) {
        let image = self.num_images() as u32;
        self.elements
            .extend(patches.into_iter().map(|values| Element::Patch { image, values }));
    }

    /// Appends `other`, renumbering its images after the ones already here.
    pub fn append(&mut self, other: &InterleavedSequence) {
        let offset = self.num_images() as u32;
        self.elements.extend(other.elements.iter().map(|el| match el {
            Element::Patch { image, values } => Element::Patch {
                image: image + offset,
                values: values.clone(),
            },
            text => text.clone(),
        }));
    }

    pub fn push_tokens(&mut self, ids: &[u32]) {
        self.elements.extend(ids.iter().map(|&id| Element::Text(id)));
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn modality_tags(&self) -> Vec<Modality> {
        self.elements.iter().map(Element::modality).collect()
    }

    pub fn text_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.elements
            .iter()
            .enumerate()
            .filter(|(_, e)| e.modality() == Modality::Text)
            .map(|(i, _)| i)
    }

    pub fn num_text(&self) -> usize {
        self.text_positions().count()
    }

    pub fn num_patches(&self) -> usize {
        self.len() - self.num_text()
    }

    /// Contiguous position range of each image, in order of appearance.
    pub fn image_spans(&self) -> Vec<Range<usize>> {
        let mut spans: Vec<Range<usize>> = Vec::new();
        let mut current: Option<(u32, usize)> = None;
        for (i, el) in self.elements.iter().enumerate() {
            let img = match el {
                Element::Patch { image, .. } => Some(*image),
                Element::Text(_) => None,
            };
            match (current, img) {
                (Some((c, _)), Some(m)) if c == m => {}
                (Some((_, start)), next) => {
                    spans.push(start..i);
                    current = next.map(|m| (m, i));
                }
                (None, Some(m)) => current = Some((m, i)),
                (None, None) => {}
            }
        }
        if let Some((_, start)) = current {
            spans.push(start..self.elements.len());
        }
        spans
    }

    pub fn num_images(&self) -> usize {
        self.image_spans().len()
    }

    pub fn ends_with_eos(&self) -> bool {
        matches!(self.elements.last(), Some(Element::Text(EOS)))
    }

    /// Checks the sequence against a vocabulary size and patch width.
    pub fn validate(&self, vocab_size: usize, patch_dim: usize) -> Result<()> {
        if self.elements.is_empty() {
            return Err(Error::input("sequence is empty"));
        }
        let mut seen_images: Vec<u32> = Vec::new();
        let mut prev_image: Option<u32> = None;
        for (i, el) in self.elements.iter().enumerate() {
            match el {
                Element::Text(id) => {
                    if *id as usize >= vocab_size {
                        return Err(Error::input(format!(
                            "token id {id} at position {i} is outside vocabulary of size {vocab_size}"
                        )));
                    }
                    if *id == PAD {
                        return Err(Error::input(format!("PAD token inside sequence at position {i}")));
                    }
                    prev_image = None;
                }
                Element::Patch { image, values } => {
                    if values.len() != patch_dim {
                        return Err(Error::input(format!(
                            "patch at position {i} has {} values, expected {patch_dim}",
                            values.len()
                        )));
                    }
                    if prev_image != Some(*image) {
                        if seen_images.contains(image) {
                            return Err(Error::input(format!(
                                "image {image} is not contiguous (resumes at position {i})"
                            )));
                        }
                        seen_images.push(*image);
                    }
                    prev_image = Some(*image);
                }
            }
        }
        Ok(())
    }

    pub fn to_record(&self) -> SequenceRecord {
        let mut text = Vec::new();
        let mut images = Vec::new();
        let mut image_at = Vec::new();
        for span in self.image_spans() {
            let before = self.elements[..span.start]
                .iter()
                .filter(|e| e.modality() == Modality::Text)
                .count();
            image_at.push(before);
            images.push(
                self.elements[span]
                    .iter()
                    .filter_map(|e| e.patch().map(<[f32]>::to_vec))
                    .collect(),
            );
        }
        for el in &self.elements {
            if let Element::Text(id) = el {
                text.push(*id);
            }
        }
        let all_leading = image_at.iter().all(|&a| a == 0);
        SequenceRecord {
            text,
            images,
            image_at: if all_leading { None } else { Some(image_at) },
        }
    }

    pub fn from_record(rec: &SequenceRecord) -> Result<Self> {
        let at: Vec<usize> = match &rec.image_at {
            Some(v) => {
                if v.len() != rec.images.len() {
                    return Err(Error::input(format!(
                        "image_at has {} entries for {} images",
                        v.len(),
                        rec.images.len()
                    )));
                }
                v.clone()
            }
            None => vec![0; rec.images.len()],
        };
        if at.windows(2).any(|w| w[0] > w[1]) || at.iter().any(|&a| a > rec.text.len()) {
            return Err(Error::input("image_at must be non-decreasing and within the text"));
        }
        let mut seq = InterleavedSequence::default();
        let mut next_image = 0;
        for t in 0..=rec.text.len() {
            while next_image < at.len() && at[next_image] == t {
                seq.push_image(rec.images[next_image].clone());
                next_image += 1;
            }
            if t < rec.text.len() {
                seq.push(Element::Text(rec.text[t]));
            }
        }
        Ok(seq)
    }
}

/// On-disk form of a sequence.
///
/// `images[k]` is inserted before text token `image_at[k]`; without
/// `image_at` every image precedes the text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceRecord {
    #[serde(default)]
    pub text: Vec<u32>,
    #[serde(default)]
    pub images: Vec<Vec<Vec<f32>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_at: Option<Vec<usize>>,
}

impl Serialize for InterleavedSequence {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_record().serialize(s)
    }
}

impl<'de> Deserialize<'de> for InterleavedSequence {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rec = SequenceRecord::deserialize(d)?;
        InterleavedSequence::from_record(&rec).map_err(serde::de::Error::custom)
    }
}
