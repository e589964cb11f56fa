//! 128-layer ziggurat for standard normals, two draws per `u64`.
//!
//! Only the MC KL oracle uses it: that loop draws ~10^10 normals, and taking
//! both 32-bit halves of each generator word is about a third faster than
//! `rand_distr::StandardNormal`. Resolution is 2^-31 of the layer width,
//! far below any MC error at the sample sizes used here.

use std::sync::OnceLock;

use rand::Rng;

const R: f64 = 3.442619855899;
const AREA: f64 = 9.91256303526217e-3;
const M1: f64 = 2147483648.0;

pub(crate) struct Ziggurat {
    kn: [u32; 128],
    wn: [f64; 128],
    fx: [f64; 128],
}

impl Ziggurat {
    fn build() -> Self {
        let (mut kn, mut wn, mut fx) = ([0u32; 128], [0.0; 128], [0.0; 128]);
        let mut dn = R;
        let mut tn = dn;
        let q = AREA / (-0.5 * dn * dn).exp();
        kn[0] = ((dn / q) * M1) as u32;
        wn[0] = q / M1;
        wn[127] = dn / M1;
        fx[0] = 1.0;
        fx[127] = (-0.5 * dn * dn).exp();
        for i in (1..=126).rev() {
            dn = (-2.0 * (AREA / dn + (-0.5 * dn * dn).exp()).ln()).sqrt();
            kn[i + 1] = ((dn / tn) * M1) as u32;
            tn = dn;
            fx[i] = (-0.5 * dn * dn).exp();
            wn[i] = dn / M1;
        }
        Self { kn, wn, fx }
    }

    pub(crate) fn get() -> &'static Self {
        static TABLES: OnceLock<Ziggurat> = OnceLock::new();
        TABLES.get_or_init(Self::build)
    }

    #[inline(always)]
    pub(crate) fn pair<G: Rng + ?Sized>(&self, rng: &mut G) -> (f64, f64) {
        let bits = rng.random::<u64>();
        (self.one(bits as u32 as i32, rng), self.one((bits >> 32) as u32 as i32, rng))
    }

    #[inline(always)]
    fn one<G: Rng + ?Sized>(&self, hz: i32, rng: &mut G) -> f64 {
        let iz = (hz & 127) as usize;
        if hz.unsigned_abs() < self.kn[iz] {
            return hz as f64 * self.wn[iz];
        }
        self.slow(hz, iz, rng)
    }

    #[cold]
    fn slow<G: Rng + ?Sized>(&self, mut hz: i32, mut iz: usize, rng: &mut G) -> f64 {
        loop {
            let x = hz as f64 * self.wn[iz];
            if iz == 0 {
                // tail beyond R
                loop {
                    let x = -(1.0 - rng.random::<f64>()).ln() / R;
                    let y = -(1.0 - rng.random::<f64>()).ln();
                    if y + y >= x * x {
                        return if hz > 0 { R + x } else { -R - x };
                    }
                }
            }
            if self.fx[iz] + rng.random::<f64>() * (self.fx[iz - 1] - self.fx[iz]) < (-0.5 * x * x).exp() {
                return x;
            }
            hz = rng.random::<u32>() as i32;
            iz = (hz & 127) as usize;
            if hz.unsigned_abs() < self.kn[iz] {
                return hz as f64 * self.wn[iz];
            }
        }
    }
}
