/** Client-side mirrors of the gateway's JSON payloads. Nothing here is
 * invented client-side: shapes follow the documented API responses. */
export {};
