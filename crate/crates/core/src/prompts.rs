//! Time-aware prompt construction.
//!
//! Two mechanisms: textual prompts ("Today is 18 January 2015.") rendered
//! from one of three fixed templates, and linear prompts that scale three
//! learned direction vectors by the normalized year/month/day scalars.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::num::Scalar;
use crate::temporal::{format_long_date, CalendarDate};

pub const TIMESTAMP_SLOT: &str = "[timestamp]";

/// The default template ("Today is ...") scored best in template selection.
pub const DEFAULT_TEMPLATE_ID: u8 = 2;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("unknown textual template id {0}; known ids are 1, 2, 3")]
    UnknownTemplate(u8),
    #[error("d_model must be at least 1")]
    ZeroDModel,
}

/// One of the three fixed textual prompt templates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextualTemplate {
    id: u8,
}

impl TextualTemplate {
    pub fn new(id: u8) -> Result<Self, PromptError> {
        if (1..=3).contains(&id) {
            Ok(Self { id })
        } else {
            Err(PromptError::UnknownTemplate(id))
        }
    }

    pub fn default_template() -> Self {
        Self { id: DEFAULT_TEMPLATE_ID }
    }

    pub fn id(&self) -> u8 {
        self.id
    }

    pub fn pattern(&self) -> &'static str {
        match self.id {
            1 => "Date: [timestamp].",
            2 => "Today is [timestamp].",
            3 => "The following text is written on [timestamp].",
            _ => unreachable!(),
        }
    }
}

/// Learned direction vectors and the fixed normalization constants for the
/// linear prompt projection. No bias term: the projection only changes the
/// scale of each direction vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearPromptParams<F> {
    pub w_year: Vec<F>,
    pub w_month: Vec<F>,
    pub w_day: Vec<F>,
    pub year_center: f64,
    pub year_scale: f64,
    pub month_scale: f64,
    pub day_scale: f64,
}

pub const DEFAULT_YEAR_CENTER: f64 = 2000.0;
pub const DEFAULT_YEAR_SCALE: f64 = 100.0;
pub const DEFAULT_MONTH_SCALE: f64 = 12.0;
pub const DEFAULT_DAY_SCALE: f64 = 31.0;

impl<F: Scalar> LinearPromptParams<F> {
    pub fn d_model(&self) -> usize {
        self.w_year.len()
    }
}

/// Renders a textual prompt by substituting the long-form date into the
/// template's single slot.
pub fn render_textual_prompt(d: CalendarDate, t: TextualTemplate) -> String {
    t.pattern().replacen(TIMESTAMP_SLOT, &format_long_date(d), 1)
}

/// The three normalized scalars (year, month, day) fed to the projection.
pub fn normalize_date_scalars<F: Scalar>(d: CalendarDate, p: &LinearPromptParams<F>) -> (F, F, F) {
    let s_y = (d.year() as f64 - p.year_center) / p.year_scale;
    let s_m = d.month() as f64 / p.month_scale;
    let s_d = d.day() as f64 / p.day_scale;
    (F::from_f64_lossy(s_y), F::from_f64_lossy(s_m), F::from_f64_lossy(s_d))
}

/// The three prompt vectors [s_y * w_year, s_m * w_month, s_d * w_day].
pub fn linear_prompt_vectors<F: Scalar>(
    d: CalendarDate,
    p: &LinearPromptParams<F>,
) -> [Vec<F>; 3] {
    let (s_y, s_m, s_d) = normalize_date_scalars(d, p);
    let scale = |w: &[F], s: F| w.iter().map(|&x| x * s).collect::<Vec<F>>();
    [scale(&p.w_year, s_y), scale(&p.w_month, s_m), scale(&p.w_day, s_d)]
}

/// Seeded Gaussian(0, 0.02^2) initialization of the three direction vectors.
pub fn init_linear_prompt_params<F: Scalar>(
    d_model: usize,
    seed: u64,
) -> Result<LinearPromptParams<F>, PromptError> {
    if d_model == 0 {
        return Err(PromptError::ZeroDModel);
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f64, 0.02).expect("valid stddev");
    let mut draw = |n: usize| {
        (0..n).map(|_| F::from_f64_lossy(normal.sample(&mut rng))).collect::<Vec<F>>()
    };
    Ok(LinearPromptParams {
        w_year: draw(d_model),
        w_month: draw(d_model),
        w_day: draw(d_model),
        year_center: DEFAULT_YEAR_CENTER,
        year_scale: DEFAULT_YEAR_SCALE,
        month_scale: DEFAULT_MONTH_SCALE,
        day_scale: DEFAULT_DAY_SCALE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::temporal::days_in_month;
    use proptest::prelude::*;

    fn d(y: i32, m: u32, day: u32) -> CalendarDate {
        CalendarDate::new(y, m, day).unwrap()
    }

    #[test]
    fn renders_all_three_templates() {
        let date = d(2015, 1, 18);
        assert_eq!(
            render_textual_prompt(date, TextualTemplate::new(2).unwrap()),
            "Today is 18 January 2015."
        );
        assert_eq!(
            render_textual_prompt(date, TextualTemplate::new(1).unwrap()),
            "Date: 18 January 2015."
        );
        assert_eq!(
            render_textual_prompt(date, TextualTemplate::new(3).unwrap()),
            "The following text is written on 18 January 2015."
        );
    }

    #[test]
    fn rejects_unknown_template() {
        assert_eq!(TextualTemplate::new(0), Err(PromptError::UnknownTemplate(0)));
        assert_eq!(TextualTemplate::new(4), Err(PromptError::UnknownTemplate(4)));
    }

    #[test]
    fn scalar_normalization() {
        let p = init_linear_prompt_params::<f64>(4, 0).unwrap();
        // The nominal anchor values (0.0, 0.5, 1.0) checked on real dates:
        // June 31 does not exist, so the day component uses a 31-day month.
        assert_eq!(normalize_date_scalars(d(2000, 6, 15), &p).0, 0.0);
        assert_eq!(normalize_date_scalars(d(2000, 6, 15), &p).1, 0.5);
        assert_eq!(normalize_date_scalars(d(2000, 1, 31), &p).2, 1.0);
        assert_eq!(normalize_date_scalars(d(2100, 12, 31), &p), (1.0, 1.0, 1.0));
        let (s_y, s_m, s_d) = normalize_date_scalars(d(2017, 2, 9), &p);
        assert!((s_y - 0.17).abs() < 1e-12);
        assert!((s_m - 2.0 / 12.0).abs() < 1e-15);
        assert!((s_d - 9.0 / 31.0).abs() < 1e-15);
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let a = init_linear_prompt_params::<f64>(32, 7).unwrap();
        let b = init_linear_prompt_params::<f64>(32, 7).unwrap();
        let c = init_linear_prompt_params::<f64>(32, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let small = init_linear_prompt_params::<f64>(4, 0).unwrap();
        assert_eq!(small.w_year.len(), 4);
        assert_eq!(small.w_month.len(), 4);
        assert_eq!(small.w_day.len(), 4);
        assert!(init_linear_prompt_params::<f64>(0, 0).is_err());
    }

    #[test]
    fn year_center_gives_zero_vector() {
        let p = init_linear_prompt_params::<f64>(8, 3).unwrap();
        let [vy, _, _] = linear_prompt_vectors(d(2000, 5, 5), &p);
        assert!(vy.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn month_day_vectors_ignore_year() {
        let p = init_linear_prompt_params::<f64>(8, 3).unwrap();
        let [_, m1, d1] = linear_prompt_vectors(d(2010, 4, 7), &p);
        let [_, m2, d2] = linear_prompt_vectors(d(2019, 4, 7), &p);
        assert_eq!(m1, m2);
        assert_eq!(d1, d2);
    }

    #[test]
    fn year_vectors_scale_by_exact_ratio() {
        let p = init_linear_prompt_params::<f64>(8, 3).unwrap();
        let [y2010, _, _] = linear_prompt_vectors(d(2010, 4, 7), &p);
        let [y2020, _, _] = linear_prompt_vectors(d(2020, 4, 7), &p);
        let (s10, _, _) = normalize_date_scalars(d(2010, 4, 7), &p);
        let (s20, _, _) = normalize_date_scalars(d(2020, 4, 7), &p);
        assert!(s10 != 0.0);
        let ratio = s20 / s10;
        for (a, b) in y2010.iter().zip(&y2020) {
            assert!((a * ratio - b).abs() <= 1e-15 * b.abs().max(1.0));
        }
    }

    fn arb_date() -> impl Strategy<Value = CalendarDate> {
        (1990..2050i32, 1..=12u32).prop_flat_map(|(y, m)| {
            (1..=days_in_month(y, m)).prop_map(move |day| d(y, m, day))
        })
    }

    proptest! {
        #[test]
        fn prompt_vectors_are_exact_scalings(date in arb_date(), seed in 0u64..1000) {
            let p = init_linear_prompt_params::<f64>(6, seed).unwrap();
            let (s_y, s_m, s_d) = normalize_date_scalars(date, &p);
            let [vy, vm, vd] = linear_prompt_vectors(date, &p);
            for i in 0..6 {
                prop_assert_eq!(vy[i], s_y * p.w_year[i]);
                prop_assert_eq!(vm[i], s_m * p.w_month[i]);
                prop_assert_eq!(vd[i], s_d * p.w_day[i]);
            }
        }

        #[test]
        fn vectors_of_two_dates_are_parallel(a in arb_date(), b in arb_date()) {
            // Cross residual after projecting one vector onto the other is 0.
            let p = init_linear_prompt_params::<f64>(6, 11).unwrap();
            let [ya, ma, da] = linear_prompt_vectors(a, &p);
            let [yb, mb, db] = linear_prompt_vectors(b, &p);
            for (u, v) in [(ya, yb), (ma, mb), (da, db)] {
                let nu: f64 = u.iter().map(|x| x * x).sum();
                if nu > 0.0 {
                    let dot: f64 = u.iter().zip(&v).map(|(x, y)| x * y).sum();
                    let resid: f64 = v
                        .iter()
                        .zip(&u)
                        .map(|(vi, ui)| vi - dot / nu * ui)
                        .map(|r| r * r)
                        .sum();
                    prop_assert!(resid < 1e-20);
                }
            }
        }

        #[test]
        fn year_norm_monotone_after_center(
            y1 in 2000i32..2050, y2 in 2000i32..2050, m in 1u32..=12,
        ) {
            let p = init_linear_prompt_params::<f64>(6, 5).unwrap();
            let (lo, hi) = if y1 <= y2 { (y1, y2) } else { (y2, y1) };
            let [v_lo, _, _] = linear_prompt_vectors(d(lo, m, 1), &p);
            let [v_hi, _, _] = linear_prompt_vectors(d(hi, m, 1), &p);
            let n_lo: f64 = v_lo.iter().map(|x| x * x).sum();
            let n_hi: f64 = v_hi.iter().map(|x| x * x).sum();
            prop_assert!(n_hi >= n_lo);
        }

        #[test]
        fn rendering_never_leaves_the_slot(date in arb_date(), id in 1u8..=3) {
            let text = render_textual_prompt(date, TextualTemplate::new(id).unwrap());
            prop_assert!(!text.contains(TIMESTAMP_SLOT));
            prop_assert!(text.ends_with('.'));
        }
    }
}
