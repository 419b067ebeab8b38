//! Deterministic batch assembly: crop, intra-mix, pair and inter-mix.

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::grid::LabelMap;
use crate::mixing::{
    inter_mix, intra_mix, multi_crop, sample_bbox_with, sample_mix_ratio_with, MixConfig, MixError, MixProvenance,
    MixedSample, SubsetSchedule,
};
use crate::par::{self, Exec};
use crate::phantom::{PhantomSample, UNLABELED};
use crate::rng::{derive_seed, rng_for};

const TAG_ORDER: u64 = 0xba7c_0001;
const TAG_CROP: u64 = 0xba7c_0002;
const TAG_INTRA: u64 = 0xba7c_0003;
const TAG_PAIR: u64 = 0xba7c_0004;

/// One batch element: a clean crop plus its intra-mixed copy.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchItem {
    pub source: usize,
    /// Clean crop. Scribbles are blank unless the source is annotated.
    pub crop: PhantomSample,
    pub mixed: MixedSample,
}

impl BatchItem {
    pub fn has_scribbles(&self) -> bool {
        self.crop.scribbles.data().iter().any(|&s| s != UNLABELED)
    }
}

/// Two consecutive items blended with ratio `ratio`.
#[derive(Clone, Debug, PartialEq)]
pub struct MixPair {
    pub first: usize,
    pub second: usize,
    pub ratio: f64,
    pub mixed: MixedSample,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub epoch: usize,
    pub step: usize,
    pub items: Vec<BatchItem>,
    pub pairs: Vec<MixPair>,
}

/// Everything batch assembly needs from the training configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchPlan<'a> {
    pub seed: u64,
    pub batch_size: usize,
    pub out_size: usize,
    /// Sources `0..scribble_sources` keep their scribbles.
    pub scribble_sources: usize,
    pub mix: &'a MixConfig,
    pub schedule: &'a SubsetSchedule,
    pub exec: Exec,
}

impl BatchPlan<'_> {
    pub fn units_per_epoch(&self, sources: usize) -> usize {
        sources * self.mix.units_per_source()
    }

    /// Default epoch length: every training unit seen once.
    pub fn steps_per_epoch(&self, sources: usize) -> usize {
        self.units_per_epoch(sources).div_ceil(self.batch_size).max(1)
    }
}

/// Builds batch `step` of `epoch`. The result depends only on the plan, the
/// dataset and the two counters.
pub fn build_batch(dataset: &[PhantomSample], plan: &BatchPlan, epoch: usize, step: usize) -> Result<Batch, MixError> {
    assert!(!dataset.is_empty(), "cannot build a batch from an empty dataset");
    let units = plan.mix.units_per_source();
    let total = dataset.len() * units;
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut rng_for(plan.seed, &[TAG_ORDER, epoch as u64]));
    let picks: Vec<usize> = (0..plan.batch_size)
        .map(|i| order[(step * plan.batch_size + i) % total])
        .collect();

    let items = par::map(plan.exec, &picks, |&unit| build_item(dataset, plan, epoch, unit));

    let mut pairs = Vec::with_capacity(plan.batch_size / 2);
    {
        for p in 0..plan.batch_size / 2 {
            let (i, j) = (2 * p, 2 * p + 1);
            let mut rng = rng_for(plan.seed, &[TAG_PAIR, epoch as u64, step as u64, p as u64]);
            let ratio = sample_mix_ratio_with(plan.mix.alpha, &mut rng)?;
            let mixed = inter_mix(&items[i].mixed, &items[j].mixed, ratio)?;
            pairs.push(MixPair {
                first: i,
                second: j,
                ratio,
                mixed,
            });
        }
    }
    Ok(Batch {
        epoch,
        step,
        items,
        pairs,
    })
}

fn build_item(dataset: &[PhantomSample], plan: &BatchPlan, epoch: usize, unit: usize) -> BatchItem {
    let units = plan.mix.units_per_source();
    let source = unit / units;
    let within = unit % units;
    let crop_index = within / plan.mix.mix_repeats.max(1);
    let crops = multi_crop(
        &dataset[source],
        &plan.mix.crops,
        plan.out_size,
        derive_seed(plan.seed, &[TAG_CROP, epoch as u64, source as u64]),
    );
    let mut crop = crops[crop_index].sample.clone();
    if source >= plan.scribble_sources {
        crop.scribbles = LabelMap::new(crop.scribbles.height(), crop.scribbles.width(), UNLABELED);
    }

    let mut rng = rng_for(plan.seed, &[TAG_INTRA, epoch as u64, unit as u64]);
    let box_mask = sample_bbox_with(plan.out_size, plan.out_size, plan.mix.box_area, &mut rng);
    let intra_ratio = sample_mix_ratio_with(plan.mix.alpha, &mut rng).expect("alpha validated with the config");
    let angle = if plan.mix.max_angle > 0.0 {
        rng.random_range(-plan.mix.max_angle..=plan.mix.max_angle)
    } else {
        0.0
    };
    let image = intra_mix(&crop.image, &box_mask, intra_ratio, angle);
    BatchItem {
        source,
        crop,
        mixed: MixedSample {
            image,
            box_mask,
            schedule: plan.schedule.clone(),
            provenance: MixProvenance {
                sources: vec![source],
                intra_ratios: vec![intra_ratio],
                angles: vec![angle],
                inter_ratio: None,
            },
        },
    }
}
