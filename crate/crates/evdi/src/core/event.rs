//! Event stream primitives.
//!
//! Timestamps are f64 seconds everywhere in memory; the on-disk formats use
//! integer microseconds (see `io`). Signed event counts follow the half-open
//! interval convention (t0, t1]: an event exactly at t0 is excluded, one
//! exactly at t1 is included.

use std::sync::OnceLock;

use crate::error::{EvdiError, Result};

/// A single brightness-change event.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    /// Time in seconds.
    pub t: f64,
    pub x: u16,
    pub y: u16,
    /// +1 for a brightness increase crossing, -1 for a decrease.
    pub polarity: i8,
}

/// Exposure interval described by its midpoint and duration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExposureWindow {
    pub mid: f64,
    pub tau: f64,
}

impl ExposureWindow {
    pub fn new(mid: f64, tau: f64) -> Result<Self> {
        if !mid.is_finite() || !tau.is_finite() || tau <= 0.0 {
            return Err(EvdiError::domain(format!(
                "exposure window needs finite mid and tau > 0, got mid={mid} tau={tau}"
            )));
        }
        Ok(ExposureWindow { mid, tau })
    }

    pub fn from_bounds(start: f64, end: f64) -> Result<Self> {
        Self::new(0.5 * (start + end), end - start)
    }

    #[inline]
    pub fn start(&self) -> f64 {
        self.mid - 0.5 * self.tau
    }

    #[inline]
    pub fn end(&self) -> f64 {
        self.mid + 0.5 * self.tau
    }

    #[inline]
    pub fn contains(&self, t: f64) -> bool {
        t >= self.start() && t <= self.end()
    }
}

/// Per-pixel view of a stream: event times, polarities and polarity prefix
/// sums, each in time order.
#[derive(Debug, Default)]
struct PixelEvents {
    times: Vec<f64>,
    polarities: Vec<i8>,
    /// prefix[i] = sum of polarities[0..i]; length is times.len() + 1.
    prefix: Vec<i64>,
}

impl PixelEvents {
    /// Signed polarity sum over (t0, t1].
    fn signed_sum(&self, t0: f64, t1: f64) -> i64 {
        let lo = self.times.partition_point(|&t| t <= t0);
        let hi = self.times.partition_point(|&t| t <= t1);
        self.prefix[hi] - self.prefix[lo]
    }
}

/// Time-sorted event stream for a fixed sensor resolution and exposure.
#[derive(Debug)]
pub struct EventStream {
    events: Vec<Event>,
    width: usize,
    height: usize,
    window: ExposureWindow,
    per_pixel: OnceLock<Vec<PixelEvents>>,
}

impl EventStream {
    pub fn new(
        events: Vec<Event>,
        width: usize,
        height: usize,
        window: ExposureWindow,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(EvdiError::shape("event stream resolution must be positive"));
        }
        let mut prev = f64::NEG_INFINITY;
        for (i, e) in events.iter().enumerate() {
            if !e.t.is_finite() {
                return Err(EvdiError::domain(format!("event {i} has non-finite time")));
            }
            if e.t < prev {
                return Err(EvdiError::domain(format!(
                    "events must be sorted by time: event {i} at t={} after t={prev}",
                    e.t
                )));
            }
            prev = e.t;
            if (e.x as usize) >= width || (e.y as usize) >= height {
                return Err(EvdiError::domain(format!(
                    "event {i} at ({}, {}) outside {width}x{height}",
                    e.x, e.y
                )));
            }
            if e.polarity != 1 && e.polarity != -1 {
                return Err(EvdiError::domain(format!(
                    "event {i} has polarity {}, expected -1 or +1",
                    e.polarity
                )));
            }
            if !window.contains(e.t) {
                return Err(EvdiError::domain(format!(
                    "event {i} at t={} outside window [{}, {}]",
                    e.t,
                    window.start(),
                    window.end()
                )));
            }
        }
        Ok(EventStream {
            events,
            width,
            height,
            window,
            per_pixel: OnceLock::new(),
        })
    }

    pub fn empty(width: usize, height: usize, window: ExposureWindow) -> Result<Self> {
        Self::new(Vec::new(), width, height, window)
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn window(&self) -> ExposureWindow {
        self.window
    }

    fn pixel_table(&self) -> &Vec<PixelEvents> {
        self.per_pixel.get_or_init(|| {
            let mut table: Vec<PixelEvents> = (0..self.width * self.height)
                .map(|_| PixelEvents::default())
                .collect();
            for e in &self.events {
                let px = &mut table[e.y as usize * self.width + e.x as usize];
                px.times.push(e.t);
                px.polarities.push(e.polarity);
            }
            for px in &mut table {
                let mut prefix = Vec::with_capacity(px.polarities.len() + 1);
                let mut acc = 0i64;
                prefix.push(acc);
                for &p in &px.polarities {
                    acc += p as i64;
                    prefix.push(acc);
                }
                px.prefix = prefix;
            }
            table
        })
    }

    fn check_pixel(&self, x: usize, y: usize) -> Result<()> {
        if x >= self.width || y >= self.height {
            return Err(EvdiError::domain(format!(
                "pixel ({x}, {y}) outside {}x{}",
                self.width, self.height
            )));
        }
        Ok(())
    }

    /// (times, polarities) of one pixel's events, in time order.
    pub fn pixel_events(&self, x: usize, y: usize) -> Result<(&[f64], &[i8])> {
        self.check_pixel(x, y)?;
        let px = &self.pixel_table()[y * self.width + x];
        Ok((&px.times, &px.polarities))
    }

    /// Signed event count of one pixel over (t0, t1]. Bounds a few ulps
    /// outside the window, as produced by recomputing times from mid/tau, are
    /// snapped onto the window before the query.
    pub fn accumulate(&self, x: usize, y: usize, t0: f64, t1: f64) -> Result<i64> {
        self.check_pixel(x, y)?;
        if t0 > t1 {
            return Err(EvdiError::domain(format!(
                "accumulate expects t0 <= t1, got {t0} > {t1}"
            )));
        }
        let (start, end) = (self.window.start(), self.window.end());
        let tol = 1e-9 * self.window.tau;
        if t0 < start - tol || t1 > end + tol {
            return Err(EvdiError::domain(format!(
                "accumulate interval [{t0}, {t1}] outside window [{start}, {end}]"
            )));
        }
        let t0 = t0.clamp(start, end);
        let t1 = t1.clamp(start, end);
        Ok(self.pixel_table()[y * self.width + x].signed_sum(t0, t1))
    }

    /// Directed signed count from `t_from` to `t_to`; negated when going
    /// backwards in time so that forward-then-back cancels exactly.
    pub fn signed_count(&self, x: usize, y: usize, t_from: f64, t_to: f64) -> Result<i64> {
        if t_from <= t_to {
            self.accumulate(x, y, t_from, t_to)
        } else {
            Ok(-self.accumulate(x, y, t_to, t_from)?)
        }
    }

    /// Total events per pixel, as a flat width*height map.
    pub fn counts_per_pixel(&self) -> Vec<usize> {
        self.pixel_table().iter().map(|p| p.times.len()).collect()
    }
}

/// Canonical total order used for deterministic event sorting.
pub fn event_order(a: &Event, b: &Event) -> std::cmp::Ordering {
    a.t.total_cmp(&b.t)
        .then(a.y.cmp(&b.y))
        .then(a.x.cmp(&b.x))
        .then(a.polarity.cmp(&b.polarity))
}
