use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::{InterleavedSequence, NUM_SPECIAL};
use crate::contrastive::{ContrastiveInstance, InstanceIds};
use crate::error::{Error, Result};
use crate::eval::{Item, Qrel, RetrievalTask};
use crate::jsonl;
use crate::rng::{component_rng, Rng as SeedRng};

pub const CAPTION_TASK: &str = "caption";
pub const LONGFORM_TASK: &str = "longform";
pub const TEXT_TASK: &str = "text";

/// Synthetic corpus parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub vocab_size: usize,
    /// Images are `grid × grid` patches.
    pub grid: usize,
    pub patch_dim: usize,
    pub n_shapes: usize,
    pub n_colors: usize,
    pub n_counts: usize,
    pub caption_pairs: usize,
    pub longform_pairs: usize,
    pub text_pairs: usize,
    /// Share of attribute combinations (and text triples) kept for evaluation.
    pub heldout_fraction: f64,
    /// Captions per held-out combination in the evaluation queries.
    pub eval_queries_per_combo: usize,
    pub hard_negatives: usize,
    /// Standard deviation of the per-patch noise.
    pub noise: f64,
    /// Derived from the master seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            vocab_size: 96,
            grid: 4,
            patch_dim: 16,
            n_shapes: 8,
            n_colors: 8,
            n_counts: 4,
            caption_pairs: 200,
            longform_pairs: 120,
            text_pairs: 200,
            heldout_fraction: 0.2,
            eval_queries_per_combo: 2,
            hard_negatives: 2,
            noise: 0.1,
            seed: 0,
        }
    }
}

const FUNCTION_WORDS: usize = 10;
const A: usize = 0;
const THE: usize = 1;
const PHOTO: usize = 2;
const OF: usize = 3;
const WITH: usize = 4;
const SHOWING: usize = 5;
const IS: usize = 6;
const BY: usize = 7;
const DOCUMENT: usize = 8;
const ABOUT: usize = 9;
const SUBJECTS: usize = 8;
const VERBS: usize = 6;
const OBJECTS: usize = 8;
const SYNONYMS: usize = 2;
const FILLER: usize = 12;
const CAPTION_TEMPLATES: usize = 3;

/// Token id layout of the synthetic vocabulary.
#[derive(Clone, Debug)]
struct Vocab {
    shape: u32,
    color: u32,
    count: u32,
    function: u32,
    subject: u32,
    verb: u32,
    object: u32,
    filler: u32,
    end: u32,
}

impl Vocab {
    fn new(spec: &SynthSpec) -> Self {
        let mut next = NUM_SPECIAL;
        let mut take = |n: usize| {
            let start = next;
            next += n as u32;
            start
        };
        let shape = take(spec.n_shapes);
        let color = take(spec.n_colors);
        let count = take(spec.n_counts);
        let function = take(FUNCTION_WORDS);
        let subject = take(SUBJECTS * SYNONYMS);
        let verb = take(VERBS * SYNONYMS);
        let object = take(OBJECTS * SYNONYMS);
        let filler = take(FILLER);
        Self {
            shape,
            color,
            count,
            function,
            subject,
            verb,
            object,
            filler,
            end: next,
        }
    }

    fn word(&self, w: usize) -> u32 {
        self.function + w as u32
    }
}

/// Attribute triple of a caption image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Combo {
    pub shape: usize,
    pub color: usize,
    pub count: usize,
}

impl Combo {
    fn shared(&self, o: &Combo) -> usize {
        (self.shape == o.shape) as usize + (self.color == o.color) as usize + (self.count == o.count) as usize
    }

    fn key(&self) -> String {
        format!("s{}c{}n{}", self.shape, self.color, self.count)
    }

    fn attributes(&self) -> Attributes {
        [
            ("shape".to_string(), self.shape as u32),
            ("color".to_string(), self.color as u32),
            ("count".to_string(), self.count as u32),
        ]
        .into()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct Triple {
    subject: usize,
    verb: usize,
    object: usize,
}

impl Triple {
    fn key(&self) -> String {
        format!("a{}v{}o{}", self.subject, self.verb, self.object)
    }

    fn attributes(&self) -> Attributes {
        [
            ("subject".to_string(), self.subject as u32),
            ("verb".to_string(), self.verb as u32),
            ("object".to_string(), self.object as u32),
        ]
        .into()
    }
}

pub type Attributes = BTreeMap<String, u32>;

/// Generating attributes of a query or document, for oracle evaluation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerKeyEntry {
    pub instance_id: String,
    pub task_id: String,
    pub attributes: Attributes,
    /// Attributes of each hard negative, in instance order.
    #[serde(default)]
    pub negatives: Vec<Attributes>,
}

/// Everything [`generate_corpus`] produces.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub spec: SynthSpec,
    pub caption: Vec<ContrastiveInstance>,
    pub longform: Vec<ContrastiveInstance>,
    pub text: Vec<ContrastiveInstance>,
    /// Training instances flattened to single sequences for stage one.
    pub cpt: Vec<InterleavedSequence>,
    pub answer_key: Vec<AnswerKeyEntry>,
    pub eval: Vec<RetrievalTask>,
}

pub const CAPTION_FILE: &str = "caption_pairs.jsonl";
pub const LONGFORM_FILE: &str = "longform_pairs.jsonl";
pub const TEXT_FILE: &str = "text_pairs.jsonl";
pub const CPT_FILE: &str = "cpt_corpus.jsonl";
pub const ANSWER_KEY_FILE: &str = "answer_key.jsonl";
pub const EVAL_DIR: &str = "eval";

impl SynthCorpus {
    pub fn task(&self, task_id: &str) -> &[ContrastiveInstance] {
        match task_id {
            CAPTION_TASK => &self.caption,
            LONGFORM_TASK => &self.longform,
            TEXT_TASK => &self.text,
            _ => &[],
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        jsonl::write(dir.join(CAPTION_FILE), &self.caption)?;
        jsonl::write(dir.join(LONGFORM_FILE), &self.longform)?;
        jsonl::write(dir.join(TEXT_FILE), &self.text)?;
        jsonl::write(dir.join(CPT_FILE), &self.cpt)?;
        jsonl::write(dir.join(ANSWER_KEY_FILE), &self.answer_key)?;
        for task in &self.eval {
            task.save(dir.join(EVAL_DIR).join(&task.name))?;
        }
        Ok(())
    }
}

/// Reads the contrastive instances of the given task files in `dir`.
pub fn load_instances(dir: impl AsRef<Path>, tasks: &[&str]) -> Result<Vec<ContrastiveInstance>> {
    let dir = dir.as_ref();
    let mut out = Vec::new();
    for t in tasks {
        let file = match *t {
            CAPTION_TASK => CAPTION_FILE,
            LONGFORM_TASK => LONGFORM_FILE,
            TEXT_TASK => TEXT_FILE,
            other => return Err(Error::Data(format!("unknown task {other}"))),
        };
        let path = dir.join(file);
        if !path.is_file() {
            return Err(Error::Data(format!("missing dataset file {}", path.display())));
        }
        out.extend(jsonl::read::<ContrastiveInstance>(&path)?);
    }
    Ok(out)
}

struct Renderer {
    spec: SynthSpec,
    shape_masks: Vec<Vec<bool>>,
    shape_protos: Vec<Vec<f32>>,
    color_protos: Vec<Vec<f32>>,
    count_protos: Vec<Vec<f32>>,
}

fn gaussian_vec(n: usize, rng: &mut impl Rng) -> Vec<f32> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

impl Renderer {
    fn new(spec: &SynthSpec) -> Self {
        let mut rng = component_rng(spec.seed, "synth.prototypes");
        let cells = spec.grid * spec.grid;
        let shape_masks = (0..spec.n_shapes)
            .map(|_| {
                let on = rng.random_range(cells / 4..=cells / 2).max(1);
                let mut idx: Vec<usize> = (0..cells).collect();
                idx.shuffle(&mut rng);
                let mut mask = vec![false; cells];
                for &i in &idx[..on] {
                    mask[i] = true;
                }
                mask
            })
            .collect();
        let mut protos = |n: usize| -> Vec<Vec<f32>> { (0..n).map(|_| gaussian_vec(spec.patch_dim, &mut rng)).collect() };
        let shape_protos = protos(spec.n_shapes);
        let color_protos = protos(spec.n_colors);
        let count_protos = protos(spec.n_counts);
        Self {
            spec: spec.clone(),
            shape_masks,
            shape_protos,
            color_protos,
            count_protos,
        }
    }

    /// Patch grid for `combo`: cells covered by the shape carry the sum of
    /// the shape, colour and count prototypes; every cell gets noise.
    fn image(&self, combo: Combo, variant: &str) -> Vec<Vec<f32>> {
        let mut rng = component_rng(self.spec.seed, &format!("synth.image.{}.{variant}", combo.key()));
        let noise = self.spec.noise as f32;
        self.shape_masks[combo.shape]
            .iter()
            .map(|&on| {
                (0..self.spec.patch_dim)
                    .map(|k| {
                        let n: f32 = StandardNormal.sample(&mut rng);
                        let base = if on {
                            self.shape_protos[combo.shape][k]
                                + self.color_protos[combo.color][k]
                                + self.count_protos[combo.count][k]
                        } else {
                            0.0
                        };
                        base + noise * n
                    })
                    .collect()
            })
            .collect()
    }
}

fn caption(v: &Vocab, c: Combo, template: usize) -> InterleavedSequence {
    let shape = v.shape + c.shape as u32;
    let color = v.color + c.color as u32;
    let count = v.count + c.count as u32;
    let ids = match template % CAPTION_TEMPLATES {
        0 => vec![v.word(PHOTO), v.word(OF), count, color, shape],
        1 => vec![v.word(A), color, shape, v.word(WITH), count],
        _ => vec![v.word(THE), shape, v.word(IS), color, count],
    };
    InterleavedSequence::from_tokens(&ids)
}

fn longform_query(v: &Vocab, c: Combo) -> InterleavedSequence {
    InterleavedSequence::from_tokens(&[
        v.word(DOCUMENT),
        v.word(ABOUT),
        v.color + c.color as u32,
        v.shape + c.shape as u32,
        v.count + c.count as u32,
    ])
}

fn filler(v: &Vocab, n: usize, rng: &mut impl Rng) -> Vec<u32> {
    (0..n).map(|_| v.filler + rng.random_range(0..FILLER as u32)).collect()
}

/// Filler text around the target image at a random slot among
/// `images.len()` images.
fn document(v: &Vocab, images: Vec<Vec<Vec<f32>>>, rng: &mut impl Rng) -> InterleavedSequence {
    let mut seq = InterleavedSequence::from_tokens(&[v.word(SHOWING)]);
    for img in images {
        let n = rng.random_range(2..=4);
        seq.push_tokens(&filler(v, n, rng));
        seq.push_image(img);
    }
    let n = rng.random_range(1..=3);
    seq.push_tokens(&filler(v, n, rng));
    seq
}

fn text_query(v: &Vocab, t: Triple) -> InterleavedSequence {
    let s = v.subject + (t.subject * SYNONYMS) as u32;
    let vb = v.verb + (t.verb * SYNONYMS) as u32;
    let o = v.object + (t.object * SYNONYMS) as u32;
    InterleavedSequence::from_tokens(&[v.word(THE), s, vb, v.word(THE), o])
}

/// The passive paraphrase, written with the second synonym of every word.
fn text_paraphrase(v: &Vocab, t: Triple) -> InterleavedSequence {
    let s = v.subject + (t.subject * SYNONYMS + 1) as u32;
    let vb = v.verb + (t.verb * SYNONYMS + 1) as u32;
    let o = v.object + (t.object * SYNONYMS + 1) as u32;
    InterleavedSequence::from_tokens(&[v.word(A), o, v.word(IS), vb, v.word(BY), v.word(A), s])
}

fn concat(a: &InterleavedSequence, b: &InterleavedSequence) -> InterleavedSequence {
    let mut out = a.clone();
    out.append(b);
    out
}

fn split<T: Clone>(mut items: Vec<T>, fraction: f64, rng: &mut SeedRng) -> (Vec<T>, Vec<T>) {
    items.shuffle(rng);
    let held = ((items.len() as f64 * fraction).round() as usize).clamp(1, items.len() - 1);
    let train = items.split_off(held);
    (train, items)
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Generation(m));
        if self.grid == 0 || self.patch_dim == 0 {
            return err("grid and patch_dim must be positive".into());
        }
        if self.n_shapes < 2 || self.n_colors < 2 || self.n_counts < 2 {
            return err("every attribute needs at least two values".into());
        }
        if self.caption_pairs == 0 || self.longform_pairs == 0 || self.text_pairs == 0 {
            return err("corpus sizes must be at least 1".into());
        }
        if !(self.heldout_fraction > 0.0 && self.heldout_fraction < 1.0) {
            return err(format!("heldout_fraction {} must lie in (0, 1)", self.heldout_fraction));
        }
        if self.eval_queries_per_combo == 0 {
            return err("eval_queries_per_combo must be at least 1".into());
        }
        let need = Vocab::new(self).end as usize;
        if self.vocab_size < need {
            return err(format!("vocab_size {} is below the {need} ids the generator uses", self.vocab_size));
        }
        Ok(())
    }

    pub fn combos(&self) -> usize {
        self.n_shapes * self.n_colors * self.n_counts
    }
}

/// Builds the three training tasks, the stage-one corpus, the answer key
/// and held-out retrieval tasks. Output depends only on `spec`.
pub fn generate_corpus(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let v = Vocab::new(spec);
    let r = Renderer::new(spec);

    let mut all = Vec::with_capacity(spec.combos());
    for shape in 0..spec.n_shapes {
        for color in 0..spec.n_colors {
            for count in 0..spec.n_counts {
                all.push(Combo { shape, color, count });
            }
        }
    }
    let (train_combos, eval_combos) = split(all, spec.heldout_fraction, &mut component_rng(spec.seed, "synth.split"));
    for (what, n) in [("caption_pairs", spec.caption_pairs), ("longform_pairs", spec.longform_pairs)] {
        if n > train_combos.len() {
            return Err(Error::Generation(format!(
                "{what} = {n} exceeds the {} training attribute combinations",
                train_combos.len()
            )));
        }
    }
    let mut triples = Vec::new();
    for subject in 0..SUBJECTS {
        for verb in 0..VERBS {
            for object in 0..OBJECTS {
                triples.push(Triple { subject, verb, object });
            }
        }
    }
    let (train_triples, eval_triples) = split(triples, spec.heldout_fraction, &mut component_rng(spec.seed, "synth.split.text"));
    if spec.text_pairs > train_triples.len() {
        return Err(Error::Generation(format!(
            "text_pairs = {} exceeds the {} training triples",
            spec.text_pairs,
            train_triples.len()
        )));
    }

    let mut answer_key = Vec::new();
    let mut rng = component_rng(spec.seed, "synth.instances");
    let image_id = |c: Combo| format!("img-{}", c.key());

    // Hard negatives share exactly one attribute with the positive.
    let hard_negatives = |c: Combo, pool: &[Combo], rng: &mut SeedRng| -> Result<Vec<Combo>> {
        let cands: Vec<Combo> = pool.iter().copied().filter(|o| o.shared(&c) == 1).collect();
        if cands.len() < spec.hard_negatives {
            return Err(Error::Generation(format!(
                "only {} combinations share one attribute with {}",
                cands.len(),
                c.key()
            )));
        }
        Ok(cands.choose_multiple(rng, spec.hard_negatives).copied().collect())
    };

    let mut order = train_combos.clone();
    order.shuffle(&mut rng);
    let mut caption_set = Vec::with_capacity(spec.caption_pairs);
    for (i, &c) in order.iter().take(spec.caption_pairs).enumerate() {
        let negs = hard_negatives(c, &train_combos, &mut rng)?;
        let id = format!("caption-{i:04}");
        let template = rng.random_range(0..CAPTION_TEMPLATES);
        answer_key.push(AnswerKeyEntry {
            instance_id: id.clone(),
            task_id: CAPTION_TASK.into(),
            attributes: c.attributes(),
            negatives: negs.iter().map(Combo::attributes).collect(),
        });
        caption_set.push(ContrastiveInstance {
            task_id: CAPTION_TASK.into(),
            query: caption(&v, c, template),
            positive: InterleavedSequence::from_image(r.image(c, "train")),
            negatives: negs.iter().map(|&n| InterleavedSequence::from_image(r.image(n, "train"))).collect(),
            ids: InstanceIds {
                instance: id.clone(),
                query: format!("{id}-q"),
                positive: image_id(c),
                negatives: negs.iter().map(|&n| image_id(n)).collect(),
            },
        });
    }

    order.shuffle(&mut rng);
    let mut longform_set = Vec::with_capacity(spec.longform_pairs);
    for (i, &c) in order.iter().take(spec.longform_pairs).enumerate() {
        let negs = hard_negatives(c, &train_combos, &mut rng)?;
        let id = format!("longform-{i:04}");
        let n_images = rng.random_range(2..=3);
        let slot = rng.random_range(0..n_images);
        let distractors: Vec<Combo> = (0..n_images - 1)
            .map(|_| *train_combos.choose(&mut rng).expect("non-empty"))
            .collect();
        let doc_for = |target: Combo, rng: &mut SeedRng| {
            let mut imgs: Vec<Vec<Vec<f32>>> = distractors.iter().map(|&d| r.image(d, "doc")).collect();
            imgs.insert(slot, r.image(target, "doc"));
            document(&v, imgs, rng)
        };
        let positive = doc_for(c, &mut rng);
        let negatives = negs.iter().map(|&n| doc_for(n, &mut rng)).collect();
        answer_key.push(AnswerKeyEntry {
            instance_id: id.clone(),
            task_id: LONGFORM_TASK.into(),
            attributes: c.attributes(),
            negatives: negs.iter().map(Combo::attributes).collect(),
        });
        longform_set.push(ContrastiveInstance {
            task_id: LONGFORM_TASK.into(),
            query: longform_query(&v, c),
            positive,
            negatives,
            ids: InstanceIds {
                instance: id.clone(),
                query: format!("{id}-q"),
                positive: format!("{id}-doc"),
                negatives: (0..negs.len()).map(|k| format!("{id}-neg{k}")).collect(),
            },
        });
    }

    let mut t_order = train_triples.clone();
    t_order.shuffle(&mut rng);
    let mut text_set = Vec::with_capacity(spec.text_pairs);
    for (i, &t) in t_order.iter().take(spec.text_pairs).enumerate() {
        // Distractors change the verb, or swap in another object.
        let mut negs = Vec::with_capacity(spec.hard_negatives);
        while negs.len() < spec.hard_negatives {
            let mut d = t;
            if negs.len() % 2 == 0 {
                d.verb = (t.verb + rng.random_range(1..VERBS)) % VERBS;
            } else {
                d.object = (t.object + rng.random_range(1..OBJECTS)) % OBJECTS;
            }
            if !negs.contains(&d) {
                negs.push(d);
            }
        }
        let id = format!("text-{i:04}");
        answer_key.push(AnswerKeyEntry {
            instance_id: id.clone(),
            task_id: TEXT_TASK.into(),
            attributes: t.attributes(),
            negatives: negs.iter().map(Triple::attributes).collect(),
        });
        text_set.push(ContrastiveInstance {
            task_id: TEXT_TASK.into(),
            query: text_query(&v, t),
            positive: text_paraphrase(&v, t),
            negatives: negs.iter().map(|&d| text_paraphrase(&v, d)).collect(),
            ids: InstanceIds {
                instance: id.clone(),
                query: format!("{id}-q"),
                positive: format!("para-{}", t.key()),
                negatives: negs.iter().map(|d| format!("para-{}", d.key())).collect(),
            },
        });
    }

    let cpt = caption_set
        .iter()
        .chain(&longform_set)
        .chain(&text_set)
        .map(|inst| concat(&inst.positive, &inst.query))
        .collect();

    // Held-out evaluation: unseen combinations rendered with fresh noise.
    let mut eval_rng = component_rng(spec.seed, "synth.eval");
    let mut cap_queries = Vec::new();
    let mut cap_pool = Vec::new();
    let mut cap_qrels = Vec::new();
    let mut lf_queries = Vec::new();
    let mut lf_pool = Vec::new();
    let mut lf_qrels = Vec::new();
    for &c in &eval_combos {
        let doc = format!("eval-{}", image_id(c));
        cap_pool.push(Item {
            id: doc.clone(),
            sequence: InterleavedSequence::from_image(r.image(c, "eval")),
        });
        answer_key.push(AnswerKeyEntry {
            instance_id: doc.clone(),
            task_id: CAPTION_TASK.into(),
            attributes: c.attributes(),
            negatives: vec![],
        });
        let first = eval_rng.random_range(0..CAPTION_TEMPLATES);
        for k in 0..spec.eval_queries_per_combo {
            let qid = format!("eval-cap-{}-{k}", c.key());
            cap_queries.push(Item {
                id: qid.clone(),
                sequence: caption(&v, c, first + k),
            });
            cap_qrels.push(Qrel {
                query_id: qid.clone(),
                relevant: vec![doc.clone()],
            });
            answer_key.push(AnswerKeyEntry {
                instance_id: qid,
                task_id: CAPTION_TASK.into(),
                attributes: c.attributes(),
                negatives: vec![],
            });
        }

        let lf_doc = format!("eval-doc-{}", c.key());
        let n_images = eval_rng.random_range(2..=3);
        let mut imgs: Vec<Vec<Vec<f32>>> = (0..n_images - 1)
            .map(|_| r.image(*train_combos.choose(&mut eval_rng).expect("non-empty"), "eval-doc"))
            .collect();
        imgs.insert(eval_rng.random_range(0..n_images), r.image(c, "eval-doc"));
        lf_pool.push(Item {
            id: lf_doc.clone(),
            sequence: document(&v, imgs, &mut eval_rng),
        });
        let qid = format!("eval-lf-{}", c.key());
        lf_queries.push(Item {
            id: qid.clone(),
            sequence: longform_query(&v, c),
        });
        lf_qrels.push(Qrel {
            query_id: qid,
            relevant: vec![lf_doc],
        });
    }
    let mut tx_queries = Vec::new();
    let mut tx_pool = Vec::new();
    let mut tx_qrels = Vec::new();
    for &t in &eval_triples {
        let doc = format!("eval-para-{}", t.key());
        tx_pool.push(Item {
            id: doc.clone(),
            sequence: text_paraphrase(&v, t),
        });
        let qid = format!("eval-text-{}", t.key());
        tx_queries.push(Item {
            id: qid.clone(),
            sequence: text_query(&v, t),
        });
        tx_qrels.push(Qrel {
            query_id: qid,
            relevant: vec![doc],
        });
    }
    let eval = vec![
        RetrievalTask::new(CAPTION_TASK, cap_queries, cap_pool, cap_qrels)?,
        RetrievalTask::new(LONGFORM_TASK, lf_queries, lf_pool, lf_qrels)?,
        RetrievalTask::new(TEXT_TASK, tx_queries, tx_pool, tx_qrels)?,
    ];

    Ok(SynthCorpus {
        spec: spec.clone(),
        caption: caption_set,
        longform: longform_set,
        text: text_set,
        cpt,
        answer_key,
        eval,
    })
}
