import { afterEach, describe, expect, it, vi } from "vitest";

import { ApiError, Client } from "../src/api.js";

interface Call {
  url: string;
  init?: RequestInit;
}

function stubFetch(reply: (url: string, init?: RequestInit) => Response): Call[] {
  const calls: Call[] = [];
  vi.stubGlobal("fetch", async (url: string, init?: RequestInit) => {
    calls.push({ url, init });
    return reply(url, init);
  });
  return calls;
}

function jsonResponse(status: number, body: unknown): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { "content-type": "application/json" },
  });
}

afterEach(() => {
  vi.unstubAllGlobals();
});

describe("Client request shapes", () => {
  it("posts session bytes as an octet stream and trims the base slash", async () => {
    const calls = stubFetch(() =>
      jsonResponse(201, { id: "abc", dims: [2, 3, 4], has_truth: true }),
    );
    const client = new Client("http://svc:9/");
    const body = new Uint8Array([1, 2, 3]);
    const created = await client.createSession(body);
    expect(created).toEqual({ id: "abc", dims: [2, 3, 4], has_truth: true });
    expect(calls).toHaveLength(1);
    expect(calls[0].url).toBe("http://svc:9/sessions");
    expect(calls[0].init?.method).toBe("POST");
    expect((calls[0].init?.headers as Record<string, string>)["content-type"]).toBe(
      "application/octet-stream",
    );
    expect(calls[0].init?.body).toBe(body);
  });

  it("sends clicks as JSON voxel coordinates plus a label", async () => {
    const calls = stubFetch(() => jsonResponse(200, { object: 1, background: 0 }));
    const client = new Client("http://svc:9");
    const summary = await client.addClick("abc", { x: 10, y: 7, z: 3 }, "object");
    expect(summary).toEqual({ object: 1, background: 0 });
    expect(calls[0].url).toBe("http://svc:9/sessions/abc/clicks");
    expect(JSON.parse(String(calls[0].init?.body))).toEqual({
      x: 10,
      y: 7,
      z: 3,
      label: "object",
    });
  });

  it("steps with a bare POST and surfaces the dice value", async () => {
    const calls = stubFetch(() => jsonResponse(200, { step: 4, dims: [2, 2, 2], dice: 0.5 }));
    const client = new Client("http://svc:9");
    const result = await client.step("abc");
    expect(result.step).toBe(4);
    expect(result.dice).toBe(0.5);
    expect(calls[0].url).toBe("http://svc:9/sessions/abc/step");
    expect(calls[0].init?.method).toBe("POST");
  });
});

describe("Client slice decoding", () => {
  it("reads the shape header and the little-endian payload", async () => {
    const values = new Float32Array([1, 2, 3, 4, 5, 6]);
    const calls = stubFetch(
      () =>
        new Response(values.buffer.slice(0), {
          status: 200,
          headers: { "X-Shape": "2,3", "content-type": "application/octet-stream" },
        }),
    );
    const client = new Client("http://svc:9");
    const slice = await client.fetchSlice("abc", "z", 1, "prob");
    expect(slice.rows).toBe(2);
    expect(slice.cols).toBe(3);
    expect(Array.from(slice.data)).toEqual([1, 2, 3, 4, 5, 6]);
    expect(calls[0].url).toBe("http://svc:9/sessions/abc/slices?axis=z&index=1&layer=prob");
  });

  it("rejects a slice response without a shape header", async () => {
    stubFetch(() => new Response(new ArrayBuffer(8), { status: 200 }));
    const client = new Client("http://svc:9");
    await expect(client.fetchSlice("abc", "x", 0, "image")).rejects.toMatchObject({
      code: "NO_SHAPE",
    });
  });

  it("rejects a slice whose byte count disagrees with the shape", async () => {
    stubFetch(
      () =>
        new Response(new ArrayBuffer(8), {
          status: 200,
          headers: { "X-Shape": "2,3" },
        }),
    );
    const client = new Client("http://svc:9");
    await expect(client.fetchSlice("abc", "x", 0, "image")).rejects.toMatchObject({
      code: "BAD_PAYLOAD",
    });
  });
});

describe("Client error mapping", () => {
  it("lifts the service {code, message} body into an ApiError", async () => {
    stubFetch(() => jsonResponse(404, { code: "NO_SESSION", message: "unknown session 'x'" }));
    const client = new Client("http://svc:9");
    const err = await client.step("x").catch((e: unknown) => e);
    expect(err).toBeInstanceOf(ApiError);
    expect(err).toMatchObject({
      status: 404,
      code: "NO_SESSION",
      message: "unknown session 'x'",
    });
  });

  it("falls back to a generic error when the body is not JSON", async () => {
    stubFetch(() => new Response("boom", { status: 500 }));
    const client = new Client("http://svc:9");
    const err = await client.step("x").catch((e: unknown) => e);
    expect(err).toMatchObject({ status: 500, code: "UNKNOWN", message: "HTTP 500" });
  });

  it("treats deleting an unknown session as already done", async () => {
    stubFetch(() => jsonResponse(404, { code: "NO_SESSION", message: "gone" }));
    const client = new Client("http://svc:9");
    await expect(client.deleteSession("x")).resolves.toBeUndefined();
  });

  it("still raises on other delete failures", async () => {
    stubFetch(() => jsonResponse(500, { code: "INTERNAL", message: "broke" }));
    const client = new Client("http://svc:9");
    await expect(client.deleteSession("x")).rejects.toMatchObject({ code: "INTERNAL" });
  });
});
