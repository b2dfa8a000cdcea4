/** Integration against the real session service: replay fidelity after
 *  rollback, divergence under a changed threshold, and byte-faithful
 *  export download. The service is spawned by global setup. */

import { beforeAll, describe, expect, it } from "vitest";

import { SessionClient } from "../src/api.js";
import { compositeIteration } from "../src/render.js";
import { firstDivergence } from "../src/state.js";

const LAYERS_ALL = { image: true, mask: true, error: true, segmentation: true };

const baseUrl = process.env.MASKREFINE_TEST_URL ?? "";
const describeIf = baseUrl ? describe : describe.skip;

describeIf("service replay", () => {
  let client: SessionClient;

  beforeAll(() => {
    client = new SessionClient(baseUrl);
  });

  async function freshSession(seed: number): Promise<string> {
    const created = await client.createSession({
      modelId: "micro",
      phantom: {
        size: 32,
        lesion: true,
        blob_count_range: [3, 5],
        blob_radius_range: [2.0, 4.5],
        lesion_radius_range: [3.0, 6.0],
        lesion_edge_width: 1.5,
        seed,
      },
      seed,
    });
    return created.session_id;
  }

  async function traceMasks(sessionId: string, iterations: number[]): Promise<number[][][]> {
    const masks: number[][][] = [];
    for (const t of iterations) {
      const payload = await client.arrays(sessionId, "mask", t);
      masks.push(payload.values);
    }
    return masks;
  }

  it("rollback + re-step with unchanged tau replays pixel-identically", async () => {
    const sessionId = await freshSession(11);
    await client.step(sessionId, 3);
    const before = await client.summary(sessionId);
    const iterations = before.iterations;
    const masksBefore = await traceMasks(sessionId, iterations);
    const imagePayload = await client.arrays(sessionId, "image", 1);

    await client.rollback(sessionId, 2);
    const after = await client.step(sessionId, iterations.length - 2);
    expect(after.iterations).toEqual(iterations);
    const masksAfter = await traceMasks(sessionId, iterations);
    expect(masksAfter).toEqual(masksBefore);

    // identical masks + identical inputs => pixel-identical overlays
    for (let i = 0; i < iterations.length; i++) {
      const error = await client.arrays(sessionId, "error", iterations[i]);
      const seg = await client.arrays(sessionId, "segmentation", iterations[i]);
      const renderA = compositeIteration(
        {
          image: imagePayload.values,
          mask: masksBefore[i],
          error: error.values,
          segmentation: seg.values,
        },
        LAYERS_ALL,
        0.5,
      );
      const renderB = compositeIteration(
        {
          image: imagePayload.values,
          mask: masksAfter[i],
          error: error.values,
          segmentation: seg.values,
        },
        LAYERS_ALL,
        0.5,
      );
      expect(Buffer.from(renderA).equals(Buffer.from(renderB))).toBe(true);
    }
  }, 120_000);

  it("raising tau after rollback produces a visible divergence marker", async () => {
    const sessionId = await freshSession(23);
    await client.step(sessionId, 3);
    const before = await client.summary(sessionId);

    await client.rollback(sessionId, 2);
    await client.setTau(sessionId, before.tau * 3.0);
    const after = await client.step(sessionId, 2);

    const diverged = firstDivergence(before.mask_area_history, after.mask_area_history);
    expect(diverged).not.toBeNull();
    expect(diverged!).toBeGreaterThanOrEqual(3); // iterations 1-2 are tau-independent
    expect(after.mask_area_history[diverged! - 1]).not.toBe(
      before.mask_area_history[diverged! - 1],
    );
  }, 120_000);

  it("accept download byte-matches the service export", async () => {
    const sessionId = await freshSession(31);
    await client.step(sessionId, 2);
    const accepted = await client.accept(sessionId);
    expect(accepted.accepted.files).toContain("segmentation.png");

    // the UI download path and a direct fetch must agree byte for byte
    for (const name of accepted.accepted.files) {
      const viaClient = Buffer.from(await client.exportFile(sessionId, name));
      const direct = Buffer.from(
        await (await fetch(`${baseUrl}/api/v1/sessions/${sessionId}/export/${name}`)).arrayBuffer(),
      );
      expect(viaClient.equals(direct)).toBe(true);
      expect(viaClient.length).toBeGreaterThan(0);
    }

    // the exported npy payload matches the segmentation the state reports
    const seg = await client.arrays(sessionId, "segmentation");
    const npy = Buffer.from(await client.exportFile(sessionId, "segmentation.npy"));
    const flat = seg.values.flat();
    const data = npy.subarray(npy.indexOf(Buffer.from("\n")) + 1);
    expect(data.length).toBe(flat.length);
    for (let i = 0; i < flat.length; i++) expect(data[i]).toBe(flat[i]);
  }, 120_000);

  it("step after termination is a terminal-state error", async () => {
    const sessionId = await freshSession(41);
    for (let i = 0; i < 40; i++) {
      const state = await client.step(sessionId, 1).catch((e) => e);
      if (state instanceof Error) {
        expect((state as { category?: string }).category).toBe("terminal");
        return;
      }
      if (state.status === "terminated") break;
    }
    await expect(client.step(sessionId, 1)).rejects.toMatchObject({ category: "terminal" });
  }, 120_000);
});
