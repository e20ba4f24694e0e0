//! Knowledge-gap packets: extract neck+head weights, compute the weight
//! delta between the two customer-side tutors, ship it as a checksummed
//! archive, apply it to the manufacturer's tutor, and gate the update
//! behind a per-category regression check.

use crate::container::{pack_tensor, read_archive, unpack_tensor, write_archive};
use crate::data::DetectionDataset;
use crate::detector::Detector;
use crate::eval::{evaluate, EvalConfig};
use crate::{Error, Result};
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;

pub const PACKET_KIND: &str = "knowledge-packet";
pub const PACKET_FORMAT_VERSION: u32 = 1;

/// Ordered (lexicographic by name) collection of named tensors drawn from
/// the neck/head namespaces.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet {
    entries: Vec<(String, ArrayD<f64>)>,
}

impl WeightSet {
    pub fn from_entries(mut entries: Vec<(String, ArrayD<f64>)>) -> Result<Self> {
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        for w in entries.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::Config(format!("duplicate weight name {}", w[0].0)));
            }
        }
        Ok(WeightSet { entries })
    }

    pub fn iter(&self) -> impl Iterator<Item = &(String, ArrayD<f64>)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.entries
            .binary_search_by(|(n, _)| n.as_str().cmp(name))
            .ok()
            .map(|i| &self.entries[i].1)
    }

    /// Hash over names and shapes only — two sets with the same layout but
    /// different values share a digest. Used to refuse cross-architecture
    /// packet application.
    pub fn architecture_digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, data) in &self.entries {
            h.update(name.as_bytes());
            h.update([0]);
            for &s in data.shape() {
                h.update((s as u64).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Round every tensor through f32 so serialization is lossless.
    pub fn quantize_f32(&mut self) {
        for (_, data) in &mut self.entries {
            data.mapv_inplace(|v| v as f32 as f64);
        }
    }
}

/// Copy the parameters under the requested namespaces. Only `neck` and
/// `head` are extractable; asking for the backbone is refused by contract.
pub fn extract_weights(model: &Detector, parts: &[&str]) -> Result<WeightSet> {
    if parts.is_empty() {
        return Err(Error::Config("no parts requested".into()));
    }
    for p in parts {
        match *p {
            "neck" | "head" => {}
            other => {
                return Err(Error::Config(format!(
                    "part `{other}` is not extractable; only neck and head travel in packets"
                )))
            }
        }
    }
    let entries = model
        .store
        .iter()
        .filter(|(name, _)| parts.iter().any(|p| name.starts_with(&format!("{p}."))))
        .map(|(name, p)| (name.clone(), p.tensor.value()))
        .collect();
    WeightSet::from_entries(entries)
}

/// Elementwise `gamma_delta * w_t2 - w_t1` over name/shape-aligned sets.
pub fn compute_delta(w_t1: &WeightSet, w_t2: &WeightSet, gamma_delta: f64) -> Result<WeightSet> {
    let mut offending = Vec::new();
    if w_t1.len() != w_t2.len() {
        offending.push(format!("{} entries vs {}", w_t1.len(), w_t2.len()));
    }
    for ((n1, d1), (n2, d2)) in w_t1.iter().zip(w_t2.iter()) {
        if n1 != n2 {
            offending.push(format!("{n1} vs {n2}"));
        } else if d1.shape() != d2.shape() {
            offending.push(format!("{n1}: {:?} vs {:?}", d1.shape(), d2.shape()));
        }
    }
    if !offending.is_empty() {
        return Err(Error::Shape(format!(
            "weight sets not aligned: {}",
            offending.join("; ")
        )));
    }
    let entries = w_t1
        .iter()
        .zip(w_t2.iter())
        .map(|((n, d1), (_, d2))| (n.clone(), d2 * gamma_delta - d1))
        .collect();
    WeightSet::from_entries(entries)
}

/// Return an updated copy of `model` with neck+head set to
/// `W + delta_update * delta`; the backbone is untouched and the input
/// model is never mutated. The delta's layout must match the model's
/// neck+head layout exactly.
pub fn apply_weight_delta(
    model: &Detector,
    delta: &WeightSet,
    delta_update: f64,
) -> Result<Detector> {
    let current = extract_weights(model, &["neck", "head"])?;
    let expected = current.architecture_digest();
    let found = delta.architecture_digest();
    if expected != found {
        return Err(Error::DigestMismatch { expected, found });
    }
    let updated = model.deep_clone();
    for (name, d) in delta.iter() {
        let base = current.get(name).expect("digest guarantees alignment");
        updated.store.set_value(name, base + &(d * delta_update))?;
    }
    updated.store.quantize_f32();
    Ok(updated)
}

/// Per-head-row category identifier as it travels in a packet: categories
/// the receiver already knows go by name; categories private to the sender
/// are replaced by an opaque token so the packet never carries private
/// label strings.
pub fn category_token(name: &str, receiver_known: &[String]) -> String {
    if receiver_known.iter().any(|k| k == name) {
        name.to_string()
    } else {
        let h = Sha256::digest(name.as_bytes());
        format!("cat-{}", &hex::encode(h)[..12])
    }
}

/// Whitelisted packet metadata. Nothing else is serialized: in particular
/// no image data and no fingerprint of the customer's private dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PacketManifest {
    pub kind: String,
    pub format_version: u32,
    pub architecture_digest: String,
    /// Tokenized class plan of the source tutors, in head-row order.
    pub class_plan: Vec<String>,
    pub gamma_delta: f64,
    pub created_at: String,
    pub presumed_dataset_fingerprint: String,
    pub entries: Vec<PacketEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PacketEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgePacket {
    pub delta: WeightSet,
    pub manifest: PacketManifest,
}

impl KnowledgePacket {
    /// Build a packet from a computed delta. `tutor_categories` is the
    /// head-row order of the source tutors; `receiver_known` the category
    /// names the manufacturer already knows (private names get tokenized).
    pub fn new(
        mut delta: WeightSet,
        tutor_categories: &[String],
        receiver_known: &[String],
        gamma_delta: f64,
        presumed_dataset_fingerprint: &str,
    ) -> Self {
        delta.quantize_f32();
        let class_plan = tutor_categories
            .iter()
            .map(|c| category_token(c, receiver_known))
            .collect();
        let entries = delta
            .iter()
            .map(|(name, d)| PacketEntry {
                name: name.clone(),
                shape: d.shape().to_vec(),
            })
            .collect();
        let manifest = PacketManifest {
            kind: PACKET_KIND.into(),
            format_version: PACKET_FORMAT_VERSION,
            architecture_digest: delta.architecture_digest(),
            class_plan,
            gamma_delta,
            created_at: chrono::Utc::now().to_rfc3339(),
            presumed_dataset_fingerprint: presumed_dataset_fingerprint.into(),
            entries,
        };
        KnowledgePacket { delta, manifest }
    }

    /// The receiver-side class list after applying this packet: the
    /// receiver's own categories extended with the packet's unknown ones.
    pub fn union_categories(&self, receiver: &[String]) -> Vec<String> {
        let mut out = receiver.to_vec();
        for c in &self.manifest.class_plan {
            if !out.contains(c) {
                out.push(c.clone());
            }
        }
        out
    }
}

pub fn serialize_packet(packet: &KnowledgePacket, path: &std::path::Path) -> Result<()> {
    let mut payload = Vec::new();
    for (_, d) in packet.delta.iter() {
        pack_tensor(&mut payload, d);
    }
    write_archive(path, &serde_json::to_vec_pretty(&packet.manifest)?, &payload)
}

pub fn deserialize_packet(path: &std::path::Path) -> Result<KnowledgePacket> {
    let (manifest, payload) = read_archive(path)?;
    let manifest: PacketManifest = serde_json::from_slice(&manifest)?;
    if manifest.kind != PACKET_KIND {
        return Err(Error::Format(format!(
            "{}: kind `{}` is not a knowledge packet",
            path.display(),
            manifest.kind
        )));
    }
    if manifest.format_version != PACKET_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported packet version {}",
            path.display(),
            manifest.format_version
        )));
    }
    let mut offset = 0usize;
    let mut entries = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        entries.push((e.name.clone(), unpack_tensor(&payload, &mut offset, &e.shape)?));
    }
    if offset != payload.len() {
        return Err(Error::Format(format!(
            "{}: {} trailing payload bytes",
            path.display(),
            payload.len() - offset
        )));
    }
    let delta = WeightSet::from_entries(entries)?;
    let found = delta.architecture_digest();
    if found != manifest.architecture_digest {
        return Err(Error::DigestMismatch {
            expected: manifest.architecture_digest,
            found,
        });
    }
    Ok(KnowledgePacket { delta, manifest })
}

/// Apply a packet to the receiver's tutor: expand the head to the union
/// class plan (fresh rows deterministic: zero weights, bias prior), verify
/// the architecture digest, then add `delta_update * delta`.
pub fn apply_packet(
    model: &Detector,
    packet: &KnowledgePacket,
    delta_update: f64,
) -> Result<Detector> {
    let union = packet.union_categories(&model.categories);
    let expanded = model.with_categories(&union)?;
    apply_weight_delta(&expanded, &packet.delta, delta_update)
}

/// Random delta with the same layout as `reference` and, per entry, the
/// same L2 norm — used by the gate-rejection experiment.
/// Build a structure-free delta with exactly the reference's per-tensor norm:
/// each tensor's values are randomly permuted and sign-flipped. The magnitude
/// multiset (and hence every norm) is preserved, but the coordinates the mass
/// lands on are random, which is what the verification gate must reject.
pub fn make_noise_delta(reference: &WeightSet, seed: u64) -> WeightSet {
    use rand::seq::SliceRandom;
    use rand::Rng;
    let entries = reference
        .iter()
        .map(|(name, d)| {
            let mut rng = crate::nn::param_rng(seed, &format!("noise.{name}"));
            let mut values: Vec<f64> = d.iter().copied().collect();
            values.shuffle(&mut rng);
            for v in &mut values {
                if rng.gen_bool(0.5) {
                    *v = -*v;
                }
            }
            let noise = ArrayD::from_shape_vec(d.raw_dim(), values)
                .expect("same element count as reference");
            (name.clone(), noise)
        })
        .collect();
    let mut set = WeightSet::from_entries(entries).expect("reference names are unique");
    set.quantize_f32();
    set
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyThresholds {
    /// Maximum tolerated absolute AP drop per retained category.
    pub default_max_ap_drop: f64,
    pub per_category: BTreeMap<String, f64>,
}

impl Default for VerifyThresholds {
    fn default() -> Self {
        VerifyThresholds {
            default_max_ap_drop: 0.10,
            per_category: BTreeMap::new(),
        }
    }
}

impl VerifyThresholds {
    pub fn for_category(&self, cat: &str) -> f64 {
        *self
            .per_category
            .get(cat)
            .unwrap_or(&self.default_max_ap_drop)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CategoryVerdict {
    pub category: String,
    pub ap_before: f64,
    pub ap_after: f64,
    pub threshold: f64,
    pub regressed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerificationReport {
    pub categories: Vec<CategoryVerdict>,
    pub passed: bool,
}

/// Evaluate both tutors on the manufacturer's verification data and flag
/// retained categories whose AP drops beyond their threshold. Neither
/// model is mutated.
pub fn verify_update(
    original_tutor: &Detector,
    updated_tutor: &Detector,
    verification_dataset: &DetectionDataset,
    thresholds: &VerifyThresholds,
    eval_config: &EvalConfig,
) -> Result<VerificationReport> {
    let before = evaluate(original_tutor, verification_dataset, eval_config)?;
    let after = evaluate(updated_tutor, verification_dataset, eval_config)?;
    let mut categories = Vec::new();
    let mut passed = true;
    for cat in &verification_dataset.category_names {
        let ap_before = before.per_class_ap.get(cat).copied().unwrap_or(0.0);
        let ap_after = after.per_class_ap.get(cat).copied().unwrap_or(0.0);
        let threshold = thresholds.for_category(cat);
        let regressed = ap_before - ap_after > threshold;
        passed &= !regressed;
        categories.push(CategoryVerdict {
            category: cat.clone(),
            ap_before,
            ap_after,
            threshold,
            regressed,
        });
    }
    Ok(VerificationReport { categories, passed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_toy_dataset, ToySpec};
    use crate::detector::{build_detector, save_checkpoint, DetectorConfig, Tier};
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};

    fn toy(num_classes: usize, seed: u64) -> Detector {
        let cats: Vec<String> = (0..num_classes).map(|i| format!("class-{i}")).collect();
        build_detector(&DetectorConfig::preset(Tier::Toy, num_classes), &cats, seed).unwrap()
    }

    fn rand_set(names: &[&str], shape: &[usize], seed: u64) -> WeightSet {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        WeightSet::from_entries(
            names
                .iter()
                .map(|n| {
                    (
                        n.to_string(),
                        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0)),
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn backbone_extraction_is_refused() {
        let m = toy(3, 1);
        assert!(extract_weights(&m, &["backbone"]).is_err());
        assert!(extract_weights(&m, &["neck", "backbone"]).is_err());
        assert!(extract_weights(&m, &[]).is_err());
    }

    #[test]
    fn extraction_is_stable_and_copies_values() {
        let m = toy(3, 2);
        let a = extract_weights(&m, &["neck", "head"]).unwrap();
        let b = extract_weights(&m, &["neck", "head"]).unwrap();
        assert_eq!(a, b);
        let (_, n, h) = m.namespace_partition();
        assert_eq!(a.len(), n.len() + h.len());
        // mutate the model afterwards; the set must not move
        let name = a.iter().next().unwrap().0.clone();
        let before = a.get(&name).unwrap().clone();
        m.store
            .set_value(&name, before.mapv(|v| v + 1.0))
            .unwrap();
        assert_eq!(a.get(&name).unwrap(), &before);
    }

    #[test]
    fn delta_arithmetic_trivials() {
        let a = rand_set(&["head.x", "neck.y"], &[2, 2], 1);
        let zero = compute_delta(&a, &a, 1.0).unwrap();
        assert!(zero.iter().all(|(_, d)| d.iter().all(|&v| v == 0.0)));
        let neg = compute_delta(&a, &a, 0.0).unwrap();
        for ((_, d), (_, orig)) in neg.iter().zip(a.iter()) {
            assert_eq!(d, &orig.mapv(|v| -v));
        }
        let s1 = WeightSet::from_entries(vec![(
            "head.w".into(),
            ArrayD::from_elem(IxDyn(&[1]), 2.0),
        )])
        .unwrap();
        let s2 = WeightSet::from_entries(vec![(
            "head.w".into(),
            ArrayD::from_elem(IxDyn(&[1]), 5.0),
        )])
        .unwrap();
        let d = compute_delta(&s1, &s2, 1.0).unwrap();
        assert_eq!(d.get("head.w").unwrap()[[0]], 3.0);
    }

    #[test]
    fn misaligned_sets_error_lists_offenders() {
        let a = rand_set(&["head.x"], &[2, 2], 1);
        let b = rand_set(&["head.y"], &[2, 2], 2);
        let err = compute_delta(&a, &b, 1.0).unwrap_err().to_string();
        assert!(err.contains("head.x") && err.contains("head.y"));
        let c = rand_set(&["head.x"], &[3, 2], 3);
        assert!(compute_delta(&a, &c, 1.0).is_err());
    }

    #[test]
    fn delta_linearity_property() {
        let a = rand_set(&["neck.a", "head.b"], &[3, 3], 4);
        let b = rand_set(&["neck.a", "head.b"], &[3, 3], 5);
        for gamma in [0.5, 1.0, 2.0] {
            let ab = compute_delta(&a, &b, gamma).unwrap();
            let ba = compute_delta(&b, &a, gamma).unwrap();
            for (((_, x), (_, y)), ((_, av), (_, bv))) in
                ab.iter().zip(ba.iter()).zip(a.iter().zip(b.iter()))
            {
                for i in 0..x.len() {
                    let lhs = x.as_slice().unwrap()[i] + y.as_slice().unwrap()[i];
                    let rhs = (gamma - 1.0)
                        * (av.as_slice().unwrap()[i] + bv.as_slice().unwrap()[i]);
                    assert!((lhs - rhs).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn apply_round_trip_is_bit_exact_and_leaves_backbone_alone() {
        let m_a = toy(3, 10);
        let m_b = toy(3, 11);
        let w_a = extract_weights(&m_a, &["neck", "head"]).unwrap();
        let w_b = extract_weights(&m_b, &["neck", "head"]).unwrap();
        let delta = compute_delta(&w_a, &w_b, 1.0).unwrap();

        let (backbone_names, _, _) = m_a.namespace_partition();
        let backbone_before: Vec<ArrayD<f64>> = backbone_names
            .iter()
            .map(|n| m_a.store.get(n).unwrap().tensor.value())
            .collect();

        let updated = apply_weight_delta(&m_a, &delta, 1.0).unwrap();
        let w_updated = extract_weights(&updated, &["neck", "head"]).unwrap();
        assert_eq!(w_updated, w_b, "neck+head must equal W_B bit-exactly");
        for (n, before) in backbone_names.iter().zip(&backbone_before) {
            assert_eq!(&updated.store.get(n).unwrap().tensor.value(), before);
            // and the source model is untouched
            assert_eq!(&m_a.store.get(n).unwrap().tensor.value(), before);
        }
        assert_eq!(
            extract_weights(&m_a, &["neck", "head"]).unwrap(),
            w_a,
            "apply must not mutate its input"
        );

        // delta_update = 0 is the identity
        let same = apply_weight_delta(&m_a, &delta, 0.0).unwrap();
        assert_eq!(same.store.digest(), m_a.store.digest());
    }

    #[test]
    fn cross_architecture_application_fails_closed() {
        let m = toy(3, 1);
        let other = {
            let cats: Vec<String> = (0..3).map(|i| format!("class-{i}")).collect();
            build_detector(&DetectorConfig::preset(Tier::Edge, 3), &cats, 1).unwrap()
        };
        let delta = compute_delta(
            &extract_weights(&other, &["neck", "head"]).unwrap(),
            &extract_weights(&other, &["neck", "head"]).unwrap(),
            1.0,
        )
        .unwrap();
        assert!(matches!(
            apply_weight_delta(&m, &delta, 1.0),
            Err(Error::DigestMismatch { .. })
        ));
    }

    fn sample_packet(private_name: &str) -> (KnowledgePacket, Vec<String>) {
        let known: Vec<String> = (0..3).map(|i| format!("class-{i}")).collect();
        let mut tutor_cats = known.clone();
        tutor_cats.push(private_name.to_string());
        let cfg = DetectorConfig::preset(Tier::Toy, 4);
        let t1 = build_detector(&cfg, &tutor_cats, 21).unwrap();
        let t2 = build_detector(&cfg, &tutor_cats, 22).unwrap();
        let delta = compute_delta(
            &extract_weights(&t1, &["neck", "head"]).unwrap(),
            &extract_weights(&t2, &["neck", "head"]).unwrap(),
            1.0,
        )
        .unwrap();
        (
            KnowledgePacket::new(delta, &tutor_cats, &known, 1.0, "fp-presumed"),
            known,
        )
    }

    #[test]
    fn packet_round_trip_is_exact() {
        let (packet, _) = sample_packet("confidential-widget");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.pkt");
        serialize_packet(&packet, &path).unwrap();
        let back = deserialize_packet(&path).unwrap();
        assert_eq!(back, packet);
    }

    #[test]
    fn corrupted_packet_is_rejected() {
        let (packet, _) = sample_packet("confidential-widget");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.pkt");
        serialize_packet(&packet, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let off = bytes.len() - 100;
        bytes[off] ^= 0x40;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(deserialize_packet(&path), Err(Error::Checksum(_))));
    }

    #[test]
    fn packet_never_carries_private_label_strings() {
        let (packet, known) = sample_packet("confidential-widget");
        assert!(packet
            .manifest
            .class_plan
            .iter()
            .all(|c| c != "confidential-widget"));
        assert!(packet.manifest.class_plan[3].starts_with("cat-"));
        // known categories pass through by name
        assert_eq!(packet.manifest.class_plan[..3], known[..]);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.pkt");
        serialize_packet(&packet, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let needle = b"confidential-widget";
        assert!(
            !bytes.windows(needle.len()).any(|w| w == needle),
            "private category name leaked into the packet bytes"
        );
    }

    #[test]
    fn packet_is_smaller_than_a_checkpoint() {
        let (packet, _) = sample_packet("confidential-widget");
        let cats: Vec<String> = (0..4).map(|i| format!("class-{i}")).collect();
        let model = build_detector(&DetectorConfig::preset(Tier::Toy, 4), &cats, 21).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let ppath = dir.path().join("p.pkt");
        let cpath = dir.path().join("m.ckpt");
        serialize_packet(&packet, &ppath).unwrap();
        save_checkpoint(&model, &cpath, serde_json::Value::Null).unwrap();
        let psize = std::fs::metadata(&ppath).unwrap().len();
        let csize = std::fs::metadata(&cpath).unwrap().len();
        assert!(psize < csize, "packet {psize} vs checkpoint {csize}");
    }

    #[test]
    fn apply_packet_expands_head_by_union_plan() {
        let (packet, known) = sample_packet("confidential-widget");
        let origin = build_detector(&DetectorConfig::preset(Tier::Toy, 3), &known, 21).unwrap();
        let updated = apply_packet(&origin, &packet, 1.0).unwrap();
        assert_eq!(updated.categories.len(), 4);
        assert_eq!(updated.categories[..3], known[..]);
        assert!(updated.categories[3].starts_with("cat-"));
        // delta_update = 0 keeps the expanded-but-unmodified weights
        let expanded = origin
            .with_categories(&packet.union_categories(&known))
            .unwrap();
        let same = apply_packet(&origin, &packet, 0.0).unwrap();
        assert_eq!(same.store.digest(), expanded.store.digest());
    }

    #[test]
    fn noise_delta_matches_reference_norms() {
        let a = rand_set(&["neck.a", "head.b"], &[4, 4], 6);
        let noise = make_noise_delta(&a, 9);
        for ((_, n), (_, r)) in noise.iter().zip(a.iter()) {
            let nn = n.iter().map(|v| v * v).sum::<f64>().sqrt();
            let rn = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((nn - rn).abs() / rn < 1e-5, "{nn} vs {rn}");
            assert_ne!(n, r);
        }
        // deterministic
        assert_eq!(make_noise_delta(&a, 9), make_noise_delta(&a, 9));
        assert_ne!(make_noise_delta(&a, 9), make_noise_delta(&a, 10));
    }

    #[test]
    fn identical_models_pass_verification() {
        let spec = ToySpec { num_images: 6, ..ToySpec::default() };
        let ds = generate_toy_dataset(&spec).unwrap();
        let cats = ds.category_names.clone();
        let cfg = DetectorConfig::preset(Tier::Toy, cats.len());
        let m = build_detector(&cfg, &cats, 7).unwrap();
        let report = verify_update(
            &m,
            &m.deep_clone(),
            &ds,
            &VerifyThresholds::default(),
            &EvalConfig::default(),
        )
        .unwrap();
        assert!(report.passed);
        assert!(report.categories.iter().all(|c| !c.regressed));
        assert_eq!(report.categories.len(), cats.len());
    }

    #[test]
    fn per_category_threshold_overrides_apply() {
        let t = VerifyThresholds {
            default_max_ap_drop: 0.1,
            per_category: [("ring".to_string(), 1.0)].into_iter().collect(),
        };
        assert_eq!(t.for_category("ring"), 1.0);
        assert_eq!(t.for_category("disc"), 0.1);
    }
}
