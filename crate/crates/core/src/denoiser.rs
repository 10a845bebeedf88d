//! Conditional noise predictor with exact hand-written reverse-mode
//! gradients.
//!
//! The latent context and the noisy latent future are concatenated along
//! the temporal axis, each frame tagged with a binary observation-indicator
//! channel (1 for context, 0 for noisy), and the temporal axis is folded
//! into channels so every output frame sees the whole sequence. The trunk
//! is an input projection, a residual conv block at full resolution, one
//! 2x down/up level with a skip connection, a second full-resolution
//! residual block, and an output projection; a sinusoidal step embedding
//! is projected per block and added as a channel bias.

use rayon::prelude::*;

use crate::diffusion::{EpsilonModel, TrainItem, TrainableDenoiser};
use crate::error::{Error, Result};
use crate::nn::{self, ParamId, ParamLayout, Scalar};
use crate::tensor::TensorF32;

#[derive(Debug, Clone)]
pub struct DenoiserSpec {
    pub l_in: usize,
    pub l_out: usize,
    pub hz: usize,
    pub wz: usize,
    pub cz: usize,
    /// Channel width at full resolution.
    pub width: usize,
    /// Channel width at the downsampled level.
    pub mid_width: usize,
    pub temb_dim: usize,
    pub temb_hidden: usize,
}

impl DenoiserSpec {
    pub fn for_latent(l_in: usize, l_out: usize, latent: (usize, usize, usize)) -> Self {
        DenoiserSpec {
            l_in,
            l_out,
            hz: latent.0,
            wz: latent.1,
            cz: latent.2,
            width: 32,
            mid_width: 64,
            temb_dim: 32,
            temb_hidden: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.l_in,
            self.l_out,
            self.hz,
            self.wz,
            self.cz,
            self.width,
            self.mid_width,
            self.temb_dim,
            self.temb_hidden,
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::contract("denoiser spec dims and widths must be >= 1"));
        }
        if self.hz % 2 != 0 || self.wz % 2 != 0 {
            return Err(Error::contract("latent grid must be even for the down/up level"));
        }
        if self.temb_dim % 2 != 0 {
            return Err(Error::contract("temb_dim must be even"));
        }
        Ok(())
    }

    fn frames(&self) -> usize {
        self.l_in + self.l_out
    }

    fn cin(&self) -> usize {
        self.frames() * (self.cz + 1)
    }

    fn cout(&self) -> usize {
        self.l_out * self.cz
    }

    pub fn z_shape(&self) -> Vec<usize> {
        vec![self.l_out, self.hz, self.wz, self.cz]
    }

    pub fn cond_shape(&self) -> Vec<usize> {
        vec![self.l_in, self.hz, self.wz, self.cz]
    }
}

#[derive(Debug, Clone, Copy)]
struct BlockIds {
    temb_w: ParamId,
    temb_b: ParamId,
    conv_a_w: ParamId,
    conv_a_b: ParamId,
    conv_b_w: ParamId,
    conv_b_b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Ids {
    conv_in_w: ParamId,
    conv_in_b: ParamId,
    temb1_w: ParamId,
    temb1_b: ParamId,
    rb_full_a: BlockIds,
    rb_mid: BlockIds,
    rb_full_b: BlockIds,
    down_w: ParamId,
    down_b: ParamId,
    up_w: ParamId,
    up_b: ParamId,
    conv_out_w: ParamId,
    conv_out_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct DenoiserNet<S: Scalar> {
    spec: DenoiserSpec,
    layout: ParamLayout,
    ids: Ids,
    pub params: Vec<S>,
}

fn block_ids(layout: &mut ParamLayout, prefix: &str, ch: usize, temb_hidden: usize) -> BlockIds {
    BlockIds {
        temb_w: layout.add(&format!("{prefix}.temb.w"), &[ch, temb_hidden], temb_hidden),
        temb_b: layout.add(&format!("{prefix}.temb.b"), &[ch], 0),
        conv_a_w: layout.add(&format!("{prefix}.conv_a.w"), &[ch, 3, 3, ch], 9 * ch),
        conv_a_b: layout.add(&format!("{prefix}.conv_a.b"), &[ch], 0),
        conv_b_w: layout.add(&format!("{prefix}.conv_b.w"), &[ch, 3, 3, ch], 9 * ch),
        conv_b_b: layout.add(&format!("{prefix}.conv_b.b"), &[ch], 0),
    }
}

struct BlockCache<S> {
    a: Vec<S>,
    b: Vec<S>,
    c: Vec<S>,
    d: Vec<S>,
    out: Vec<S>,
}

struct Cache<S> {
    x0: Vec<S>,
    temb_raw: Vec<S>,
    th_pre: Vec<S>,
    th: Vec<S>,
    h1: Vec<S>,
    rb1: BlockCache<S>,
    pool: Vec<S>,
    dn: Vec<S>,
    rb_mid: BlockCache<S>,
    up: Vec<S>,
    skip: Vec<S>,
    rb2: BlockCache<S>,
    out: Vec<S>,
}

/// Parameter gradients plus the gradient with respect to the noisy latent
/// input.
struct BackwardOut<S> {
    dparams: Vec<S>,
    dz_t: Vec<S>,
}

impl<S: Scalar> DenoiserNet<S> {
    /// Deterministic fan-in-scaled initialization.
    pub fn init(seed: u64, spec: DenoiserSpec) -> Result<Self> {
        spec.validate()?;
        let mut layout = ParamLayout::new();
        let ids = Ids {
            conv_in_w: layout.add("conv_in.w", &[spec.width, 3, 3, spec.cin()], 9 * spec.cin()),
            conv_in_b: layout.add("conv_in.b", &[spec.width], 0),
            temb1_w: layout.add("temb1.w", &[spec.temb_hidden, spec.temb_dim], spec.temb_dim),
            temb1_b: layout.add("temb1.b", &[spec.temb_hidden], 0),
            rb_full_a: block_ids(&mut layout, "rb_full_a", spec.width, spec.temb_hidden),
            down_w: layout.add("down.w", &[spec.mid_width, 3, 3, spec.width], 9 * spec.width),
            down_b: layout.add("down.b", &[spec.mid_width], 0),
            rb_mid: block_ids(&mut layout, "rb_mid", spec.mid_width, spec.temb_hidden),
            up_w: layout.add("up.w", &[spec.width, 3, 3, spec.mid_width], 9 * spec.mid_width),
            up_b: layout.add("up.b", &[spec.width], 0),
            rb_full_b: block_ids(&mut layout, "rb_full_b", spec.width, spec.temb_hidden),
            conv_out_w: layout.add("conv_out.w", &[spec.cout(), 3, 3, spec.width], 9 * spec.width),
            conv_out_b: layout.add("conv_out.b", &[spec.cout()], 0),
        };
        let params = layout.init_params(seed);
        Ok(DenoiserNet { spec, layout, ids, params })
    }

    pub fn spec(&self) -> &DenoiserSpec {
        &self.spec
    }

    pub fn num_params(&self) -> usize {
        self.layout.total()
    }

    pub fn named_tensors(&self) -> Vec<(String, TensorF32)> {
        self.layout.to_named_tensors(&self.params)
    }

    pub fn load_named_tensors(&mut self, entries: &[(String, TensorF32)]) -> Result<()> {
        self.params = self.layout.from_named_tensors(entries)?;
        Ok(())
    }

    fn check_inputs(&self, z_t: &TensorF32, z_cond: &TensorF32) -> Result<()> {
        if z_t.shape() != self.spec.z_shape().as_slice() {
            return Err(Error::ShapeMismatch {
                expected: self.spec.z_shape(),
                got: z_t.shape().to_vec(),
            });
        }
        if z_cond.shape() != self.spec.cond_shape().as_slice() {
            return Err(Error::ShapeMismatch {
                expected: self.spec.cond_shape(),
                got: z_cond.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn assemble(&self, z_t: &[S], z_cond: &[S]) -> Vec<S> {
        let s = &self.spec;
        nn::assemble_latents(z_t, z_cond, s.l_in, s.l_out, s.hz, s.wz, s.cz)
    }

    fn fold_latent(&self, latent: &[S]) -> Vec<S> {
        let s = &self.spec;
        let (hz, wz, cz) = (s.hz, s.wz, s.cz);
        let cout = s.cout();
        let mut v = vec![S::ZERO; hz * wz * cout];
        for f in 0..s.l_out {
            for y in 0..hz {
                for x in 0..wz {
                    for c in 0..cz {
                        v[(y * wz + x) * cout + f * cz + c] =
                            latent[((f * hz + y) * wz + x) * cz + c];
                    }
                }
            }
        }
        v
    }

    fn unfold_latent_slice(&self, v: &[S]) -> Vec<S> {
        let s = &self.spec;
        let (hz, wz, cz) = (s.hz, s.wz, s.cz);
        let cout = s.cout();
        let mut data = vec![S::ZERO; s.l_out * hz * wz * cz];
        for f in 0..s.l_out {
            for y in 0..hz {
                for x in 0..wz {
                    for c in 0..cz {
                        data[((f * hz + y) * wz + x) * cz + c] =
                            v[(y * wz + x) * cout + f * cz + c];
                    }
                }
            }
        }
        data
    }

    fn unfold_latent(&self, v: &[S]) -> TensorF32 {
        let s = &self.spec;
        let (hz, wz, cz) = (s.hz, s.wz, s.cz);
        let cout = s.cout();
        let mut data = vec![0.0f32; s.l_out * hz * wz * cz];
        for f in 0..s.l_out {
            for y in 0..hz {
                for x in 0..wz {
                    for c in 0..cz {
                        data[((f * hz + y) * wz + x) * cz + c] =
                            v[(y * wz + x) * cout + f * cz + c].to_f64() as f32;
                    }
                }
            }
        }
        TensorF32::from_parts(s.z_shape(), data)
    }

    fn view(&self, id: ParamId) -> &[S] {
        self.layout.view(&self.params, id)
    }

    fn block_forward(
        &self,
        ids: &BlockIds,
        input: &[S],
        th: &[S],
        h: usize,
        w: usize,
        ch: usize,
    ) -> BlockCache<S> {
        let mut tb_out = vec![S::ZERO; ch];
        nn::linear(th, self.view(ids.temb_w), self.view(ids.temb_b), ch, &mut tb_out);
        let mut a = input.to_vec();
        nn::add_channel_bias(&mut a, ch, &tb_out);
        let mut b = vec![S::ZERO; a.len()];
        nn::silu(&a, &mut b);
        let mut c = vec![S::ZERO; a.len()];
        nn::conv2d(&b, h, w, ch, self.view(ids.conv_a_w), self.view(ids.conv_a_b), ch, 3, &mut c);
        let mut d = vec![S::ZERO; a.len()];
        nn::silu(&c, &mut d);
        let mut e = vec![S::ZERO; a.len()];
        nn::conv2d(&d, h, w, ch, self.view(ids.conv_b_w), self.view(ids.conv_b_b), ch, 3, &mut e);
        let out: Vec<S> = input.iter().zip(&e).map(|(&i, &v)| i + v).collect();
        BlockCache { a, b, c, d, out }
    }

    #[allow(clippy::too_many_arguments)]
    fn block_backward(
        &self,
        ids: &BlockIds,
        cache: &BlockCache<S>,
        dout: &[S],
        th: &[S],
        h: usize,
        w: usize,
        ch: usize,
        dinput: &mut [S],
        dth: &mut [S],
        dparams: &mut [S],
    ) {
        let e = self.layout.entries();
        // split of dparams by entry offsets happens through raw indexing;
        // views into one flat buffer cannot be borrowed mutably twice.
        let mut dd = vec![S::ZERO; cache.d.len()];
        {
            let (dw_off, db_off) = (e[ids.conv_b_w.index()].offset, e[ids.conv_b_b.index()].offset);
            let (dw_len, db_len) = (e[ids.conv_b_w.index()].len, e[ids.conv_b_b.index()].len);
            let mut dw = vec![S::ZERO; dw_len];
            let mut db = vec![S::ZERO; db_len];
            nn::conv2d_bwd(
                &cache.d, h, w, ch, self.view(ids.conv_b_w), ch, 3, dout, &mut dd, &mut dw, &mut db,
            );
            accumulate(&mut dparams[dw_off..dw_off + dw_len], &dw);
            accumulate(&mut dparams[db_off..db_off + db_len], &db);
        }
        let mut dc = vec![S::ZERO; cache.c.len()];
        nn::silu_bwd(&cache.c, &dd, &mut dc);
        let mut db_ = vec![S::ZERO; cache.b.len()];
        {
            let (dw_off, db_off) = (e[ids.conv_a_w.index()].offset, e[ids.conv_a_b.index()].offset);
            let (dw_len, db_len) = (e[ids.conv_a_w.index()].len, e[ids.conv_a_b.index()].len);
            let mut dw = vec![S::ZERO; dw_len];
            let mut db = vec![S::ZERO; db_len];
            nn::conv2d_bwd(
                &cache.b, h, w, ch, self.view(ids.conv_a_w), ch, 3, &dc, &mut db_, &mut dw, &mut db,
            );
            accumulate(&mut dparams[dw_off..dw_off + dw_len], &dw);
            accumulate(&mut dparams[db_off..db_off + db_len], &db);
        }
        let mut da = vec![S::ZERO; cache.a.len()];
        nn::silu_bwd(&cache.a, &db_, &mut da);
        // skip path plus the block body path
        for i in 0..dinput.len() {
            dinput[i] += dout[i] + da[i];
        }
        // channel bias -> temb projection
        let mut d_tbout = vec![S::ZERO; ch];
        nn::add_channel_bias_bwd(&da, ch, &mut d_tbout);
        {
            let (dw_off, db_off) = (e[ids.temb_w.index()].offset, e[ids.temb_b.index()].offset);
            let (dw_len, db_len) = (e[ids.temb_w.index()].len, e[ids.temb_b.index()].len);
            let mut dw = vec![S::ZERO; dw_len];
            let mut db = vec![S::ZERO; db_len];
            nn::linear_bwd(th, self.view(ids.temb_w), ch, &d_tbout, dth, &mut dw, &mut db);
            accumulate(&mut dparams[dw_off..dw_off + dw_len], &dw);
            accumulate(&mut dparams[db_off..db_off + db_len], &db);
        }
    }

    fn forward_cached(&self, z_t: &[S], t: usize, z_cond: &[S]) -> Result<Cache<S>> {
        let s = &self.spec;
        if z_t.len() != s.l_out * s.hz * s.wz * s.cz || z_cond.len() != s.l_in * s.hz * s.wz * s.cz {
            return Err(Error::contract("latent slice length mismatch"));
        }
        let (hz, wz) = (s.hz, s.wz);
        let (hh, hw) = (hz / 2, wz / 2);

        let x0 = self.assemble(z_t, z_cond);
        let temb_raw: Vec<S> = nn::sinusoidal_embedding(t, s.temb_dim);
        let mut th_pre = vec![S::ZERO; s.temb_hidden];
        nn::linear(
            &temb_raw,
            self.view(self.ids.temb1_w),
            self.view(self.ids.temb1_b),
            s.temb_hidden,
            &mut th_pre,
        );
        let mut th = vec![S::ZERO; s.temb_hidden];
        nn::silu(&th_pre, &mut th);

        let mut h1 = vec![S::ZERO; hz * wz * s.width];
        nn::conv2d(
            &x0,
            hz,
            wz,
            s.cin(),
            self.view(self.ids.conv_in_w),
            self.view(self.ids.conv_in_b),
            s.width,
            3,
            &mut h1,
        );
        let rb1 = self.block_forward(&self.ids.rb_full_a, &h1, &th, hz, wz, s.width);

        let mut pool = vec![S::ZERO; hh * hw * s.width];
        nn::avgpool2(&rb1.out, hz, wz, s.width, &mut pool);
        let mut dn = vec![S::ZERO; hh * hw * s.mid_width];
        nn::conv2d(
            &pool,
            hh,
            hw,
            s.width,
            self.view(self.ids.down_w),
            self.view(self.ids.down_b),
            s.mid_width,
            3,
            &mut dn,
        );
        let rb_mid = self.block_forward(&self.ids.rb_mid, &dn, &th, hh, hw, s.mid_width);

        let mut up = vec![S::ZERO; hz * wz * s.mid_width];
        nn::upsample2(&rb_mid.out, hh, hw, s.mid_width, &mut up);
        let mut uc = vec![S::ZERO; hz * wz * s.width];
        nn::conv2d(
            &up,
            hz,
            wz,
            s.mid_width,
            self.view(self.ids.up_w),
            self.view(self.ids.up_b),
            s.width,
            3,
            &mut uc,
        );
        let skip: Vec<S> = uc.iter().zip(&rb1.out).map(|(&a, &b)| a + b).collect();
        drop(uc);
        let rb2 = self.block_forward(&self.ids.rb_full_b, &skip, &th, hz, wz, s.width);

        let mut out = vec![S::ZERO; hz * wz * s.cout()];
        nn::conv2d(
            &rb2.out,
            hz,
            wz,
            s.width,
            self.view(self.ids.conv_out_w),
            self.view(self.ids.conv_out_b),
            s.cout(),
            3,
            &mut out,
        );
        Ok(Cache {
            x0,
            temb_raw,
            th_pre,
            th,
            h1,
            rb1,
            pool,
            dn,
            rb_mid,
            up,
            skip,
            rb2,
            out,
        })
    }

    /// Reverse pass from a gradient on the folded output map.
    fn backward(&self, cache: &Cache<S>, dout_map: &[S]) -> BackwardOut<S> {
        let s = &self.spec;
        let (hz, wz) = (s.hz, s.wz);
        let (hh, hw) = (hz / 2, wz / 2);
        let e = self.layout.entries();
        let mut dparams = vec![S::ZERO; self.layout.total()];
        let mut dth = vec![S::ZERO; s.temb_hidden];

        // conv_out
        let mut dr2 = vec![S::ZERO; cache.rb2.out.len()];
        {
            let (wo, bo) = (self.ids.conv_out_w, self.ids.conv_out_b);
            let mut dw = vec![S::ZERO; e[wo.index()].len];
            let mut db = vec![S::ZERO; e[bo.index()].len];
            nn::conv2d_bwd(
                &cache.rb2.out, hz, wz, s.width, self.view(wo), s.cout(), 3, dout_map, &mut dr2,
                &mut dw, &mut db,
            );
            accumulate(&mut dparams[e[wo.index()].offset..e[wo.index()].offset + e[wo.index()].len], &dw);
            accumulate(&mut dparams[e[bo.index()].offset..e[bo.index()].offset + e[bo.index()].len], &db);
        }

        // rb_full_b
        let mut dskip = vec![S::ZERO; cache.skip.len()];
        self.block_backward(
            &self.ids.rb_full_b, &cache.rb2, &dr2, &cache.th, hz, wz, s.width, &mut dskip,
            &mut dth, &mut dparams,
        );

        // skip split: duc = dskip, dr1 += dskip
        let mut dr1 = dskip.clone();

        // up conv
        let mut dup = vec![S::ZERO; cache.up.len()];
        {
            let (wo, bo) = (self.ids.up_w, self.ids.up_b);
            let mut dw = vec![S::ZERO; e[wo.index()].len];
            let mut db = vec![S::ZERO; e[bo.index()].len];
            nn::conv2d_bwd(
                &cache.up, hz, wz, s.mid_width, self.view(wo), s.width, 3, &dskip, &mut dup,
                &mut dw, &mut db,
            );
            accumulate(&mut dparams[e[wo.index()].offset..e[wo.index()].offset + e[wo.index()].len], &dw);
            accumulate(&mut dparams[e[bo.index()].offset..e[bo.index()].offset + e[bo.index()].len], &db);
        }
        let mut drmid = vec![S::ZERO; cache.rb_mid.out.len()];
        nn::upsample2_bwd(&dup, hh, hw, s.mid_width, &mut drmid);

        // rb_mid
        let mut ddn = vec![S::ZERO; cache.dn.len()];
        self.block_backward(
            &self.ids.rb_mid, &cache.rb_mid, &drmid, &cache.th, hh, hw, s.mid_width, &mut ddn,
            &mut dth, &mut dparams,
        );

        // down conv + pool
        let mut dpool = vec![S::ZERO; cache.pool.len()];
        {
            let (wo, bo) = (self.ids.down_w, self.ids.down_b);
            let mut dw = vec![S::ZERO; e[wo.index()].len];
            let mut db = vec![S::ZERO; e[bo.index()].len];
            nn::conv2d_bwd(
                &cache.pool, hh, hw, s.width, self.view(wo), s.mid_width, 3, &ddn, &mut dpool,
                &mut dw, &mut db,
            );
            accumulate(&mut dparams[e[wo.index()].offset..e[wo.index()].offset + e[wo.index()].len], &dw);
            accumulate(&mut dparams[e[bo.index()].offset..e[bo.index()].offset + e[bo.index()].len], &db);
        }
        nn::avgpool2_bwd(&dpool, hz, wz, s.width, &mut dr1);

        // rb_full_a
        let mut dh1 = vec![S::ZERO; cache.h1.len()];
        self.block_backward(
            &self.ids.rb_full_a, &cache.rb1, &dr1, &cache.th, hz, wz, s.width, &mut dh1, &mut dth,
            &mut dparams,
        );

        // conv_in
        let mut dx0 = vec![S::ZERO; cache.x0.len()];
        {
            let (wo, bo) = (self.ids.conv_in_w, self.ids.conv_in_b);
            let mut dw = vec![S::ZERO; e[wo.index()].len];
            let mut db = vec![S::ZERO; e[bo.index()].len];
            nn::conv2d_bwd(
                &cache.x0, hz, wz, s.cin(), self.view(wo), s.width, 3, &dh1, &mut dx0, &mut dw,
                &mut db,
            );
            accumulate(&mut dparams[e[wo.index()].offset..e[wo.index()].offset + e[wo.index()].len], &dw);
            accumulate(&mut dparams[e[bo.index()].offset..e[bo.index()].offset + e[bo.index()].len], &db);
        }

        // time embedding trunk
        let mut dth_pre = vec![S::ZERO; s.temb_hidden];
        nn::silu_bwd(&cache.th_pre, &dth, &mut dth_pre);
        {
            let (wo, bo) = (self.ids.temb1_w, self.ids.temb1_b);
            let mut dw = vec![S::ZERO; e[wo.index()].len];
            let mut db = vec![S::ZERO; e[bo.index()].len];
            let mut d_raw = vec![S::ZERO; s.temb_dim];
            nn::linear_bwd(
                &cache.temb_raw,
                self.view(wo),
                s.temb_hidden,
                &dth_pre,
                &mut d_raw,
                &mut dw,
                &mut db,
            );
            accumulate(&mut dparams[e[wo.index()].offset..e[wo.index()].offset + e[wo.index()].len], &dw);
            accumulate(&mut dparams[e[bo.index()].offset..e[bo.index()].offset + e[bo.index()].len], &db);
        }

        let s2 = &self.spec;
        let dz_t = nn::disassemble_zt_grad(&dx0, s2.l_in, s2.l_out, s2.hz, s2.wz, s2.cz);
        BackwardOut { dparams, dz_t }
    }

    /// Prediction without gradient bookkeeping.
    pub fn forward(&self, z_t: &TensorF32, t: usize, z_cond: &TensorF32) -> Result<TensorF32> {
        self.check_inputs(z_t, z_cond)?;
        let cache = self.forward_cached(&to_scalar::<S>(z_t), t, &to_scalar::<S>(z_cond))?;
        Ok(self.unfold_latent(&cache.out))
    }

    /// Slice-based prediction in the scalar type, for exact 64-bit
    /// verification paths. Returns the latent-ordered output.
    pub fn forward_slices(&self, z_t: &[S], t: usize, z_cond: &[S]) -> Result<Vec<S>> {
        let cache = self.forward_cached(z_t, t, z_cond)?;
        Ok(self.unfold_latent_slice(&cache.out))
    }

    /// Loss and exact parameter gradients of the mean-squared noise
    /// residual, averaged over the batch.
    pub fn loss_and_grads_generic(&self, items: &[TrainItem]) -> Result<(f64, Vec<S>)> {
        if items.is_empty() {
            return Err(Error::contract("batch must be nonempty"));
        }
        let batch = items.len() as f64;
        let per: Vec<(f64, Vec<S>)> = items
            .par_iter()
            .map(|item| -> Result<(f64, Vec<S>)> {
                let cache =
                    self.forward_cached(&to_scalar::<S>(&item.z_t), item.t, &to_scalar::<S>(&item.z_cond))?;
                let target = self.fold_latent(&to_scalar::<S>(&item.eps));
                let numel = target.len() as f64;
                let mut loss = 0.0f64;
                let mut dout = vec![S::ZERO; target.len()];
                for i in 0..target.len() {
                    let r = cache.out[i].to_f64() - target[i].to_f64();
                    loss += r * r;
                    dout[i] = S::from_f64(2.0 * r / (numel * batch));
                }
                let back = self.backward(&cache, &dout);
                Ok((loss / numel, back.dparams))
            })
            .collect::<Result<_>>()?;
        let mut total_loss = 0.0;
        let mut grads = vec![S::ZERO; self.layout.total()];
        for (loss, dp) in per {
            total_loss += loss / batch;
            accumulate(&mut grads, &dp);
        }
        Ok((total_loss, grads))
    }

    /// Vector-Jacobian product with respect to the noisy latent input:
    /// returns `(d eps_hat / d z_t)^T upstream`.
    pub fn vjp_input(
        &self,
        z_t: &TensorF32,
        t: usize,
        z_cond: &TensorF32,
        upstream: &TensorF32,
    ) -> Result<TensorF32> {
        z_t.check_same_shape(upstream)?;
        self.check_inputs(z_t, z_cond)?;
        let dz = self.vjp_input_slices(
            &to_scalar::<S>(z_t),
            t,
            &to_scalar::<S>(z_cond),
            &to_scalar::<S>(upstream),
        )?;
        let data: Vec<f32> = dz.iter().map(|v| v.to_f64() as f32).collect();
        Ok(TensorF32::from_parts(self.spec.z_shape(), data))
    }

    /// Slice-based VJP in the scalar type; `upstream` is latent-ordered.
    pub fn vjp_input_slices(&self, z_t: &[S], t: usize, z_cond: &[S], upstream: &[S]) -> Result<Vec<S>> {
        let cache = self.forward_cached(z_t, t, z_cond)?;
        let dout = self.fold_latent(upstream);
        let back = self.backward(&cache, &dout);
        Ok(back.dz_t)
    }
}

fn accumulate<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Widens a tensor payload into the network scalar type.
pub(crate) fn to_scalar<S: Scalar>(t: &TensorF32) -> Vec<S> {
    t.data().iter().map(|&v| S::from_f64(v as f64)).collect()
}

impl EpsilonModel for DenoiserNet<f32> {
    fn predict_eps(&self, z_t: &TensorF32, t: usize, z_cond: Option<&TensorF32>) -> Result<TensorF32> {
        let cond = z_cond.ok_or_else(|| Error::contract("denoiser requires a latent context"))?;
        self.forward(z_t, t, cond)
    }
}

impl TrainableDenoiser for DenoiserNet<f32> {
    fn loss_and_grads(&self, items: &[TrainItem]) -> Result<(f64, Vec<f32>)> {
        self.loss_and_grads_generic(items)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{finite_difference_gradient, max_relative_error, AdamConfig, AdamState};
    use crate::rand_util;

    fn tiny_spec() -> DenoiserSpec {
        DenoiserSpec {
            l_in: 2,
            l_out: 2,
            hz: 4,
            wz: 4,
            cz: 2,
            width: 3,
            mid_width: 4,
            temb_dim: 4,
            temb_hidden: 6,
        }
    }

    fn rand_inputs(spec: &DenoiserSpec, seed: u64) -> (TensorF32, TensorF32, TensorF32) {
        let mut rng = rand_util::rng_from_seed(seed);
        let z_t = rand_util::normal_tensor(spec.z_shape(), &mut rng);
        let z_cond = rand_util::normal_tensor(spec.cond_shape(), &mut rng);
        let eps = rand_util::normal_tensor(spec.z_shape(), &mut rng);
        (z_t, z_cond, eps)
    }

    #[test]
    fn init_is_deterministic_and_validates() {
        let a: DenoiserNet<f32> = DenoiserNet::init(5, tiny_spec()).unwrap();
        let b: DenoiserNet<f32> = DenoiserNet::init(5, tiny_spec()).unwrap();
        assert_eq!(a.params, b.params);
        assert!(a.num_params() > 0);
        let bad = DenoiserSpec { width: 0, ..tiny_spec() };
        assert!(DenoiserNet::<f32>::init(5, bad).is_err());
        let odd = DenoiserSpec { hz: 5, ..tiny_spec() };
        assert!(DenoiserNet::<f32>::init(5, odd).is_err());
    }

    #[test]
    fn fresh_net_output_is_small_on_zero_input() {
        let spec = DenoiserSpec::for_latent(10, 10, (16, 16, 3));
        let net: DenoiserNet<f32> = DenoiserNet::init(0, spec.clone()).unwrap();
        let z_t = TensorF32::zeros(spec.z_shape());
        let z_cond = TensorF32::zeros(spec.cond_shape());
        let out = net.forward(&z_t, spec_t(&spec), &z_cond).unwrap();
        let rms = (out.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>()
            / out.len() as f64)
            .sqrt();
        assert!(rms < 1.0, "fresh-net RMS {rms}");
    }

    fn spec_t(_spec: &DenoiserSpec) -> usize {
        17
    }

    #[test]
    fn forward_shape_contract_and_conditioning_sensitivity() {
        let spec = tiny_spec();
        let net: DenoiserNet<f32> = DenoiserNet::init(1, spec.clone()).unwrap();
        let (z_t, z_cond, _) = rand_inputs(&spec, 2);
        let out = net.forward(&z_t, 3, &z_cond).unwrap();
        assert_eq!(out.shape(), z_t.shape());

        let mut rng = rand_util::rng_from_seed(9);
        let bump = rand_util::normal_tensor(spec.cond_shape(), &mut rng);
        let z_cond2 = z_cond.axpby(1.0, &bump, 0.1).unwrap();
        let out2 = net.forward(&z_t, 3, &z_cond2).unwrap();
        let delta: f64 = out
            .data()
            .iter()
            .zip(out2.data())
            .map(|(&a, &b)| ((a - b) as f64).abs())
            .sum();
        assert!(delta > 0.0, "conditioning must be wired");

        // changing t changes the output too
        let out_t = net.forward(&z_t, 4, &z_cond).unwrap();
        assert_ne!(out.data(), out_t.data());

        let bad = TensorF32::zeros(vec![1, 4, 4, 2]);
        assert!(net.forward(&bad, 3, &z_cond).is_err());
    }

    #[test]
    fn forward_f64_matches_f32_within_mixed_precision_tolerance() {
        let spec = tiny_spec();
        let net32: DenoiserNet<f32> = DenoiserNet::init(7, spec.clone()).unwrap();
        let net64: DenoiserNet<f64> = DenoiserNet::init(7, spec.clone()).unwrap();
        let (z_t, z_cond, _) = rand_inputs(&spec, 3);
        let o32 = net32.forward(&z_t, 5, &z_cond).unwrap();
        let o64 = net64.forward(&z_t, 5, &z_cond).unwrap();
        let scale = o64.norm_l2().max(1e-6);
        let mut diff = 0.0f64;
        for (a, b) in o32.data().iter().zip(o64.data()) {
            diff += ((a - b) as f64).powi(2);
        }
        assert!(
            diff.sqrt() / scale < 1e-4,
            "relative precision gap {}",
            diff.sqrt() / scale
        );
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let spec = tiny_spec();
        let net: DenoiserNet<f64> = DenoiserNet::init(11, spec.clone()).unwrap();
        let (z_t, z_cond, eps) = rand_inputs(&spec, 4);
        let items = vec![TrainItem {
            z_t,
            t: 2,
            z_cond,
            eps,
        }];
        let (_, grads) = net.loss_and_grads_generic(&items).unwrap();
        let mut probe = net.clone();
        let numeric = finite_difference_gradient(
            |p: &[f64]| {
                probe.params.copy_from_slice(p);
                probe.loss_and_grads_generic(&items).unwrap().0
            },
            &net.params,
            1e-5,
        );
        let err = max_relative_error(&grads, &numeric, 1e-6);
        assert!(err < 1e-4, "max relative gradient error {err}");
    }

    #[test]
    fn zero_net_zero_target_gives_zero_loss_and_grads() {
        let spec = tiny_spec();
        let mut net: DenoiserNet<f32> = DenoiserNet::init(0, spec.clone()).unwrap();
        net.params.iter_mut().for_each(|p| *p = 0.0);
        let items = vec![TrainItem {
            z_t: TensorF32::zeros(spec.z_shape()),
            t: 1,
            z_cond: TensorF32::zeros(spec.cond_shape()),
            eps: TensorF32::zeros(spec.z_shape()),
        }];
        let (loss, grads) = net.loss_and_grads_generic(&items).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn duplicated_batch_has_same_gradients() {
        let spec = tiny_spec();
        let net: DenoiserNet<f64> = DenoiserNet::init(3, spec.clone()).unwrap();
        let (z_t, z_cond, eps) = rand_inputs(&spec, 6);
        let single = vec![TrainItem {
            z_t: z_t.clone(),
            t: 4,
            z_cond: z_cond.clone(),
            eps: eps.clone(),
        }];
        let doubled = vec![single[0].clone(), single[0].clone()];
        let (l1, g1) = net.loss_and_grads_generic(&single).unwrap();
        let (l2, g2) = net.loss_and_grads_generic(&doubled).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let spec = tiny_spec();
        let net: DenoiserNet<f64> = DenoiserNet::init(13, spec.clone()).unwrap();
        let (z_t, z_cond, _) = rand_inputs(&spec, 7);
        let mut rng = rand_util::rng_from_seed(8);
        let probe = rand_util::normal_tensor(spec.z_shape(), &mut rng);
        let zt64: Vec<f64> = z_t.data().iter().map(|&v| v as f64).collect();
        let cond64: Vec<f64> = z_cond.data().iter().map(|&v| v as f64).collect();
        let probe64: Vec<f64> = probe.data().iter().map(|&v| v as f64).collect();
        let analytic = net.vjp_input_slices(&zt64, 3, &cond64, &probe64).unwrap();
        let numeric = finite_difference_gradient(
            |x: &[f64]| {
                let out = net.forward_slices(x, 3, &cond64).unwrap();
                out.iter().zip(&probe64).map(|(a, b)| a * b).sum()
            },
            &zt64,
            1e-5,
        );
        let err = max_relative_error(&analytic, &numeric, 1e-6);
        assert!(err < 1e-4, "max relative input-gradient error {err}");
    }

    #[test]
    fn training_trajectory_is_deterministic() {
        let spec = tiny_spec();
        let run = || -> Vec<f32> {
            let mut net: DenoiserNet<f32> = DenoiserNet::init(21, spec.clone()).unwrap();
            let mut opt = AdamState::new(net.num_params());
            let cfg = AdamConfig::default();
            for step in 0..10 {
                let (z_t, z_cond, eps) = rand_inputs(&spec, 100 + step);
                let items = vec![TrainItem { z_t, t: 1 + (step as usize % 4), z_cond, eps }];
                let (_, grads) = net.loss_and_grads_generic(&items).unwrap();
                opt.step(&mut net.params, &grads, &cfg).unwrap();
            }
            net.params
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn checkpoint_round_trip_preserves_params() {
        let spec = tiny_spec();
        let net: DenoiserNet<f32> = DenoiserNet::init(31, spec.clone()).unwrap();
        let named = net.named_tensors();
        let mut other: DenoiserNet<f32> = DenoiserNet::init(99, spec).unwrap();
        assert_ne!(net.params, other.params);
        other.load_named_tensors(&named).unwrap();
        assert_eq!(net.params, other.params);
    }
}

impl crate::diffusion::VjpEpsilonModel for DenoiserNet<f32> {
    fn vjp_eps(
        &self,
        z_t: &TensorF32,
        t: usize,
        z_cond: Option<&TensorF32>,
        upstream: &TensorF32,
    ) -> Result<TensorF32> {
        let cond = z_cond.ok_or_else(|| Error::contract("denoiser requires a latent context"))?;
        self.vjp_input(z_t, t, cond, upstream)
    }
}
